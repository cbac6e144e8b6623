"""Visual reconstruction generators, critics and their adversarial objectives.

Two variants share the same reconstruction target (the sentence's visual
feature vector ``v``), reconstructed from the translation model's final
decoder state ``h_T``:

* ``g-wgan``: a conditional generator G([z, h_T]) judged by a 3-layer relu
  critic on [v, h_T], trained as a WGAN with gradient penalty;
* ``q-waae``: a deterministic generator G(h_T) with an MSE reconstruction
  loss, plus a linear critic that pushes the distribution of h_T towards a
  standard normal prior (adversarial autoencoder with gradient penalty).

``regression-only`` keeps the q-waae generator and MSE loss without any
critic; ``none`` disables the auxiliary pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import glorot

VARIANTS = ("none", "regression-only", "q-waae", "g-wgan")
LOG_FLOOR = 1e-12


class AdvConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdvConfig:
    variant: str = "q-waae"
    lambda_a: float = 0.2
    lambda_r: float = 0.2
    lambda_gp: float = 10.0
    lambda_critic: int = 5
    noise_dim: int = 128
    gen_dropout: float = 0.3
    paper_literal_signs: bool = False

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise AdvConfigError(f"unknown variant '{self.variant}', expected one of {VARIANTS}")
        if min(self.lambda_a, self.lambda_r, self.lambda_gp) < 0:
            raise AdvConfigError("loss coefficients must be non-negative")
        if self.lambda_critic < 1:
            raise AdvConfigError("lambda_critic must be at least 1")
        if self.variant == "g-wgan" and self.noise_dim < 1:
            raise AdvConfigError("g-wgan needs a positive noise dimension")
        if not 0.0 <= self.gen_dropout < 1.0:
            raise AdvConfigError("gen_dropout must lie in [0, 1)")

    @property
    def has_generator(self) -> bool:
        return self.variant != "none"

    @property
    def has_critic(self) -> bool:
        return self.variant in ("q-waae", "g-wgan")


def critic_widths(dec_hidden: int) -> tuple[int, int]:
    """Hidden widths of the g-wgan critic: 1024/512 at a 512-unit decoder, scaled linearly."""
    return max(1, 2 * dec_hidden), max(1, dec_hidden)


class AdvParams:
    """Generator and critic weights for one variant.

    Generator tensors are prefixed ``G.``, critic tensors ``D.``.
    """

    def __init__(self, variant: str, tensors: dict[str, Tensor]):
        self.variant = variant
        self.tensors = tensors

    @classmethod
    def init(cls, config: AdvConfig, dec_hidden: int, feat_dim: int, rng: np.random.Generator) -> "AdvParams":
        config.validate()
        shapes: dict[str, tuple[int, ...]] = {}
        if config.variant in ("regression-only", "q-waae"):
            shapes["G.W_rec"] = (dec_hidden, feat_dim)
            shapes["G.b_rec"] = (feat_dim,)
        if config.variant == "q-waae":
            shapes["D.W_adv"] = (dec_hidden, 1)
            shapes["D.b_adv"] = (1,)
        if config.variant == "g-wgan":
            h1, h2 = critic_widths(dec_hidden)
            shapes["G.W_rec"] = (config.noise_dim + dec_hidden, feat_dim)
            shapes["G.b_rec"] = (feat_dim,)
            shapes["D.W_adv1"] = (feat_dim + dec_hidden, h1)
            shapes["D.b_adv1"] = (h1,)
            shapes["D.W_adv2"] = (h1, h2)
            shapes["D.b_adv2"] = (h2,)
            shapes["D.W_adv3"] = (h2, 1)
            shapes["D.b_adv3"] = (1,)
        tensors = {}
        for name, shp in shapes.items():
            arr = np.zeros(shp) if len(shp) == 1 else glorot(rng, *shp)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config.variant, tensors)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def generator_parameters(self) -> list[Tensor]:
        return [t for k, t in self.tensors.items() if k.startswith("G.")]

    def critic_parameters(self) -> list[Tensor]:
        return [t for k, t in self.tensors.items() if k.startswith("D.")]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())


# ---------------------------------------------------------------------------
# generators


def generate_waae(params: AdvParams, h_T) -> Tensor:
    """v' = tanh(h_T W_rec + b)."""
    h_T = ad.as_tensor(h_T)
    W = params["G.W_rec"]
    if h_T.shape[-1] != W.shape[0]:
        raise ad.ShapeError(f"generator expects state dimension {W.shape[0]}, got {h_T.shape[-1]}")
    return ad.tanh(ad.affine(h_T, W, params["G.b_rec"]))


def generate_wgan(params: AdvParams, z, h_T, dropout: float = 0.0, rng=None, train: bool = True) -> Tensor:
    """v' = tanh(dropout([z, h_T]) W_rec + b)."""
    z, h_T = ad.as_tensor(z), ad.as_tensor(h_T)
    W = params["G.W_rec"]
    if z.shape[-1] + h_T.shape[-1] != W.shape[0]:
        raise ad.ShapeError(
            f"generator expects |z| + |h_T| = {W.shape[0]}, got {z.shape[-1]} + {h_T.shape[-1]}"
        )
    x = ad.dropout(ad.concat([z, h_T], axis=-1), dropout, rng, train)
    return ad.tanh(ad.affine(x, W, params["G.b_rec"]))


# ---------------------------------------------------------------------------
# critics


def critic(params: AdvParams, x) -> Tensor:
    """Raw critic score per row of ``x``.

    q-waae: linear map of a latent code.  g-wgan: relu MLP on a
    concatenated [v, h_T] row.
    """
    x = ad.as_tensor(x)
    if params.variant == "q-waae":
        W = params["D.W_adv"]
        if x.shape[-1] != W.shape[0]:
            raise ad.ShapeError(f"critic expects dimension {W.shape[0]}, got {x.shape[-1]}")
        out = ad.affine(x, W, params["D.b_adv"])
    elif params.variant == "g-wgan":
        W1 = params["D.W_adv1"]
        if x.shape[-1] != W1.shape[0]:
            raise ad.ShapeError(f"critic expects dimension {W1.shape[0]}, got {x.shape[-1]}")
        o1 = ad.relu(ad.affine(x, W1, params["D.b_adv1"]))
        o2 = ad.relu(ad.affine(o1, params["D.W_adv2"], params["D.b_adv2"]))
        out = ad.affine(o2, params["D.W_adv3"], params["D.b_adv3"])
    else:
        raise AdvConfigError(f"variant '{params.variant}' has no critic")
    return ad.reshape(out, out.shape[:-1])


def critic_on_pair(params: AdvParams, v, h_T) -> Tensor:
    return critic(params, ad.concat([ad.as_tensor(v), ad.as_tensor(h_T)], axis=-1))


# ---------------------------------------------------------------------------
# losses


def _sample_eps(rng, n: int) -> np.ndarray:
    return rng.random(n) if rng is not None else np.random.default_rng().random(n)


def gradient_penalty(critic_fn, real, fake, lambda_gp: float, rng=None, eps=None) -> Tensor:
    """λ_gp · mean_i (‖∇ critic(x̂_i)‖₂ − 1)², x̂_i = ε_i real_i + (1 − ε_i) fake_i.

    ``critic_fn`` maps a (B, d) tensor to B scores.  Real and fake enter as
    constants; the result is differentiable with respect to the critic's
    weights through the input gradient.
    """
    real = np.asarray(ad.as_tensor(real).data)
    fake = np.asarray(ad.as_tensor(fake).data)
    if real.shape != fake.shape:
        raise ad.ShapeError(f"gradient penalty: real {real.shape} and fake {fake.shape} differ")
    batch = real.shape[0] if real.ndim > 1 else 1
    if eps is None:
        eps = _sample_eps(rng, batch)
    eps = np.asarray(eps, dtype=np.float64).reshape((-1,) + (1,) * (real.ndim - 1))
    x_hat = eps * real + (1.0 - eps) * fake
    g = ad.input_gradient(critic_fn, x_hat)
    gap = ad.l2norm(g, axis=-1) - 1.0
    return ad.mean(gap * gap) * lambda_gp


def wgan_losses(
    params: AdvParams,
    v,
    v_fake: Tensor,
    h_T: Tensor,
    lambda_a: float,
    lambda_gp: float,
    rng=None,
    paper_literal_signs: bool = False,
    eps=None,
) -> tuple[Tensor, Tensor]:
    """(critic_loss, generator_loss) for the conditional WGAN-GP.

    critic_loss = −(mean D(v) − mean D(v')) + GP, computed on detached v'
    and h_T.  generator_loss = −λ_a mean D(v') keeps the graph into the
    generator and h_T (``+λ_a`` with ``paper_literal_signs``).
    """
    v = ad.as_tensor(v)
    h_c = h_T.detach()
    fake_c = v_fake.detach()
    d_real = critic_on_pair(params, v, h_c)
    d_fake = critic_on_pair(params, fake_c, h_c)
    h_const = h_c.data

    def fn(x):
        return critic_on_pair(params, x, Tensor._wrap(np.broadcast_to(h_const, x.shape[:-1] + h_const.shape[-1:])))

    gp = gradient_penalty(fn, v, fake_c, lambda_gp, rng, eps)
    critic_loss = ad.mean(d_fake) - ad.mean(d_real) + gp
    d_gen = ad.mean(critic_on_pair(params, v_fake, h_T))
    sign = 1.0 if paper_literal_signs else -1.0
    generator_loss = d_gen * (sign * lambda_a)
    return critic_loss, generator_loss


def waae_critic_loss(params: AdvParams, h_T, h_prior, lambda_gp: float, rng=None, eps=None) -> Tensor:
    """−(mean σD(h′) − mean σD(h_T)) + GP on latent interpolations (raw linear score)."""
    h_c = ad.as_tensor(h_T).detach()
    h_prior = ad.as_tensor(h_prior)
    s_prior = ad.sigmoid(critic(params, h_prior))
    s_code = ad.sigmoid(critic(params, h_c))
    gp = gradient_penalty(lambda x: critic(params, x), h_c, h_prior, lambda_gp, rng, eps)
    return ad.mean(s_code) - ad.mean(s_prior) + gp


def waae_encoder_loss(params: AdvParams, h_T: Tensor, v, v_fake: Tensor, lambda_a: float,
                      lambda_r: float, counter: list | None = None) -> Tensor:
    """λ_r · MSE(v, v') − λ_a · mean log σD(h_T)."""
    rec = ad.mse(ad.as_tensor(v), v_fake) * lambda_r
    if lambda_a == 0 or params.variant != "q-waae":
        return rec
    s = ad.sigmoid(critic(params, h_T))
    low = int((s.data < LOG_FLOOR).sum())
    if low and counter is not None:
        counter.append(low)
    return rec - ad.mean(ad.log(s, floor=LOG_FLOOR)) * lambda_a


def waae_losses(
    params: AdvParams,
    h_T: Tensor,
    v,
    v_fake: Tensor,
    lambda_a: float,
    lambda_r: float,
    lambda_gp: float,
    rng=None,
    h_prior=None,
    eps=None,
    counter: list | None = None,
) -> tuple[Tensor, Tensor]:
    """(critic_loss, encoder_generator_loss) for the latent adversarial autoencoder.

    ``h_prior`` defaults to a standard-normal draw shaped like ``h_T``.
    """
    if h_prior is None:
        gen = rng if rng is not None else np.random.default_rng()
        h_prior = gen.standard_normal(h_T.shape)
    critic_loss = waae_critic_loss(params, h_T, h_prior, lambda_gp, rng, eps)
    enc_loss = waae_encoder_loss(params, h_T, v, v_fake, lambda_a, lambda_r, counter)
    return critic_loss, enc_loss


def reconstruction_loss(params: AdvParams, h_T: Tensor, v, lambda_r: float) -> Tensor:
    """Regression-only auxiliary loss λ_r · MSE(v, G(h_T))."""
    return ad.mse(ad.as_tensor(v), generate_waae(params, h_T)) * lambda_r


def total_loss(loss_q: Tensor, aux: Tensor | float | None = None) -> Tensor:
    """Translation loss plus the (already weighted) auxiliary term."""
    if aux is None:
        return loss_q
    if not np.isfinite(ad.as_tensor(aux).data).all() or not np.isfinite(loss_q.data).all():
        raise ad.NumericError("total_loss received a non-finite term")
    return loss_q + aux
