"""AdamW: adaptive moments with decoupled weight decay.

Decay applies only to matrices and tables (ndim >= 2); biases, layer-norm
parameters and the modality vectors are excluded, following common
transformer practice.
"""

import numpy as np

from .autodiff import Tensor


class AdamW:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def register(self, name: str, tensor: Tensor) -> None:
        """Track a parameter added after construction (e.g. a new head)."""
        self.params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)

    def step(self, grads: dict) -> None:
        """Apply one update from a {name: gradient} map."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay > 0.0 and param.data.ndim >= 2:
                update = update + self.weight_decay * param.data
            param.data -= self.lr * update
