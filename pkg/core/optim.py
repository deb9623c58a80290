"""优化器 - 按参数名原地更新 numpy 数组"""

from typing import Dict, Mapping

import numpy as np


class SGD:
    def __init__(self, lr: float = 1e-2):
        self.lr = lr

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            params[name] -= self.lr * g


class Adam:
    """Adam，状态按参数名保存；名字集合可以逐步变化（稀疏层选择）"""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t: Dict[str, int] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name in sorted(grads):
            g = grads[name]
            m = self._m.get(name)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                self._v[name] = np.zeros_like(g)
                self._t[name] = 0
            v = self._v[name]
            t = self._t[name] + 1
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self._m[name], self._v[name], self._t[name] = m, v, t

    def reset(self, name: str) -> None:
        """参数被外部覆盖（例如聚合后回写）时清掉动量"""
        self._m.pop(name, None)
        self._v.pop(name, None)
        self._t.pop(name, None)
