from .tensor import Tensor, no_grad, concat, dropout
from .layers import Module, Conv2d, Dense, ReLU, Softmax, MaxPool2, Upsample2, Dropout, LayerNorm
from .optim import Adam
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint

__all__ = [
    'Tensor', 'no_grad', 'concat', 'dropout',
    'Module', 'Conv2d', 'Dense', 'ReLU', 'Softmax', 'MaxPool2', 'Upsample2', 'Dropout', 'LayerNorm',
    'Adam', 'Checkpoint', 'save_checkpoint', 'load_checkpoint',
]
