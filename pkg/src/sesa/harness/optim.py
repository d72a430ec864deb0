"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params, lr=1e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            p.data = p.data * (1.0 - self.lr * self.weight_decay)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        """Moment buffers as named arrays, for checkpointing."""
        out = {"optim.t": np.array(float(self.t))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"optim.m.{i}"] = m.copy()
            out[f"optim.v.{i}"] = v.copy()
        return out

    def load_state(self, state):
        self.t = int(state["optim.t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"optim.m.{i}"])
            self.v[i] = np.array(state[f"optim.v.{i}"])
