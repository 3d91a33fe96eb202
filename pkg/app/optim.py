"""
Optimizer
Decoupled-weight-decay Adam over a named set of Tensor parameters
"""
import numpy as np


class AdamW:
    """AdamW with a per-parameter weight-decay exemption list"""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, no_decay=()):
        """
        Args:
            params (dict): name -> Tensor, updated in place
            lr (float): default learning rate (overridable per step)
            weight_decay (float): decoupled decay coefficient
            no_decay (iterable): parameter names exempt from decay
        """
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t

        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay > 0 and name not in self.no_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self):
        """Moments keyed 'm.<name>' / 'v.<name>' plus the step counter"""
        arrays = {}
        for name in self.params:
            arrays[f'm.{name}'] = self.m[name]
            arrays[f'v.{name}'] = self.v[name]
        return {'t': self.t, 'arrays': arrays}

    def load_state_dict(self, state):
        self.t = int(state['t'])
        for name in self.params:
            self.m[name] = np.array(state['arrays'][f'm.{name}'], dtype=self.params[name].data.dtype)
            self.v[name] = np.array(state['arrays'][f'v.{name}'], dtype=self.params[name].data.dtype)
