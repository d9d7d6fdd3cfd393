import pytest

from src.processing.manifest import MANIFEST_NAME, ArtifactManifest, sha256_file
from src.utils.errors import VerificationError


def test_record_and_verify(tmp_path):
    artifact = tmp_path / "scores.csv"
    artifact.write_text("TaC\n1.0\n")
    manifest = ArtifactManifest(tmp_path)
    assert manifest.record(artifact, "abc", 7, "eval-track") == "scores.csv"
    assert (tmp_path / MANIFEST_NAME).exists()

    reloaded = ArtifactManifest(tmp_path)
    assert reloaded.entries["scores.csv"]["sha256"] == sha256_file(artifact)
    assert reloaded.entries["scores.csv"]["seed"] == 7
    assert reloaded.verify("abc") == ["scores.csv"]


def test_tampering_is_detected(tmp_path):
    artifact = tmp_path / "tracks.csv"
    artifact.write_text("a\n")
    manifest = ArtifactManifest(tmp_path)
    manifest.record(artifact, "abc", 1, "track")
    artifact.write_text("b\n")
    with pytest.raises(VerificationError):
        manifest.verify()
    artifact.unlink()
    with pytest.raises(VerificationError):
        manifest.verify()


def test_foreign_config_hash_fails(tmp_path):
    artifact = tmp_path / "x.csv"
    artifact.write_text("x\n")
    manifest = ArtifactManifest(tmp_path)
    manifest.record(artifact, "abc", 1, "track")
    with pytest.raises(VerificationError):
        manifest.verify("def")


def test_empty_manifest_fails(tmp_path):
    with pytest.raises(VerificationError):
        ArtifactManifest(tmp_path).verify()


@pytest.mark.parametrize("where", ["absolute", "relative"])
def test_artifact_outside_output_dir_is_skipped(tmp_path, where):
    out_dir = tmp_path / "runs" / "mine"
    shared = tmp_path / "runs" / "shared"
    shared.mkdir(parents=True)
    (shared / "unet.nnck").write_bytes(b"weights")
    target = shared / "unet.nnck" if where == "absolute" else out_dir / ".." / "shared" / "unet.nnck"
    manifest = ArtifactManifest(out_dir)
    assert manifest.record(target, "abc", 1, "track") is None
    assert manifest.entries == {}
    assert not (out_dir / MANIFEST_NAME).exists()
