# Term-by-term evaluation of the two-exit objective used by the golden loss test.
import numpy as np

z1 = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 2.0]])
z2 = np.array([[2.0, 0.0, 1.0], [1.0, 1.0, -1.0]])
f1 = np.array([[0.5, -0.5], [1.0, 0.0]])
f2 = np.array([[0.0, 0.5], [1.5, -1.0]])
y = np.array([1, 2])
alpha, lam, T = 0.3, 0.1, 1.0


def softmax(z):
    e = np.exp(z / T - (z / T).max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


q1, q2 = softmax(z1), softmax(z2)
ce1 = -np.mean(np.log(q1[np.arange(2), y]))
ce2 = -np.mean(np.log(q2[np.arange(2), y]))
kl1 = np.mean(np.sum(q2 * (np.log(q2) - np.log(q1)), axis=1))
hint1 = np.mean(np.sum((f1 - f2) ** 2, axis=1))
total = (1 - alpha) * ce1 + alpha * kl1 + lam * hint1 + ce2
for name, v in [("ce1", ce1), ("kl1", kl1), ("hint1", hint1), ("ce2", ce2), ("total", total)]:
    print(f"{name} {v:.17g}")
