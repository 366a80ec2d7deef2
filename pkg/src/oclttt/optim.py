"""SGD with heavy-ball momentum and coupled L2 weight decay."""
from .errors import ShapeError


class SGD:
    """In-place SGD over a ``name -> Tensor`` mapping.

    Update per step::

        d = grad + weight_decay * w
        v = momentum * v + d
        w = w - lr * v

    The first step initialises ``v = d`` which is the same recurrence with a
    zero buffer.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, names=None):
        for name in names or self.params:
            sgd_step(self.params[name], self.velocity, name, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def sgd_update(w, g, v, lr, momentum, weight_decay):
    """Update array ``w`` in place from gradient ``g``; returns the new velocity."""
    if g.shape != w.shape:
        raise ShapeError("sgd_step", w.shape, g.shape)
    d = g + weight_decay * w if weight_decay else g
    v = d.copy() if v is None else momentum * v + d
    w -= lr * v
    return v


def sgd_step(param, velocity, name, lr, momentum, weight_decay):
    if param.grad is None:
        return
    velocity[name] = sgd_update(param.data, param.grad, velocity.get(name), lr, momentum, weight_decay)
