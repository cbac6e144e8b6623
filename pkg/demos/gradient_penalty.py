"""Double backpropagation through a critic.

A linear critic with weight norm 3 has input gradient w everywhere, so the
penalty is lambda_gp * (3 - 1)^2 = 40 whatever the samples are. Its gradient
with respect to w is 2 lambda_gp (|w| - 1) w / |w|, which needs a backward
pass through a backward pass.
"""

import numpy as np

from grounded_mmt import adversarial as adv
from grounded_mmt import autodiff as ad

rng = np.random.default_rng(0)

# %% a linear critic o = x W_adv + b on 3-dimensional inputs
w = np.array([0.0, 3.0, 0.0])
params = adv.AdvParams("q-waae", {
    "D.W_adv": ad.Tensor(w.reshape(-1, 1), requires_grad=True),
    "D.b_adv": ad.Tensor(np.zeros(1), requires_grad=True),
})
real, fake = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))

gp = adv.gradient_penalty(lambda x: adv.critic(params, x), real, fake, lambda_gp=10.0, rng=rng)
print(f"penalty           {float(gp.data):.12f}")

# %% second-order gradient against the closed form
ad.backward(gp)
analytic = 2 * 10.0 * (np.linalg.norm(w) - 1) * w / np.linalg.norm(w)
print("autodiff dGP/dw  ", params["D.W_adv"].grad[:, 0])
print("analytic dGP/dw  ", analytic)

# %% the same check on a two-layer relu critic, against central differences
W1 = ad.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
W2 = ad.Tensor(rng.normal(size=(5, 1)), requires_grad=True)


def mlp(x):
    return ad.sum_(ad.matmul(ad.relu(ad.matmul(x, W1)), W2), axis=-1)


eps = rng.random(8)
loss = adv.gradient_penalty(mlp, real, fake, 10.0, eps=eps)
(g_W1,) = ad.grad(loss, [W1])

h = 1e-5
fd = np.zeros_like(W1.data)
for idx in np.ndindex(W1.shape):
    old = W1.data[idx]
    W1.data[idx] = old + h
    up = float(adv.gradient_penalty(mlp, real, fake, 10.0, eps=eps).data)
    W1.data[idx] = old - h
    down = float(adv.gradient_penalty(mlp, real, fake, 10.0, eps=eps).data)
    W1.data[idx] = old
    fd[idx] = (up - down) / (2 * h)
rel = np.abs(g_W1.data - fd).max() / max(np.abs(fd).max(), 1e-12)
print(f"relu critic, max relative error vs finite differences: {rel:.2e}")
