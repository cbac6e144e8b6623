"""Attention-based multimodal translation model (bi-GRU encoder, conditional GRU decoder).

Row-vector convention throughout: a weight of shape (n, m) maps an
n-dimensional input to m dimensions via ``x @ W``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import BOS, EOS, PAD

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    src_vocab: int
    tgt_vocab: int
    emb: int = 32
    enc_hidden: int = 64
    dec_hidden: int = 64
    bottleneck: int = 32
    feat_dim: int = 64

    @property
    def annotation(self) -> int:
        return 2 * self.enc_hidden

    @classmethod
    def preset(cls, name: str, src_vocab: int, tgt_vocab: int, feat_dim: int | None = None) -> "ModelDims":
        if name == "desk":
            dims = cls(src_vocab, tgt_vocab, 32, 64, 64, 32, 64)
        elif name == "paper":
            dims = cls(src_vocab, tgt_vocab, 256, 512, 512, 256, 2048)
        else:
            raise ModelError(f"unknown preset '{name}' (expected 'desk' or 'paper')")
        if feat_dim is not None:
            dims = cls(**{**asdict(dims), "feat_dim": feat_dim})
        return dims


@dataclass
class Dropouts:
    emb: float = 0.3
    annotations: float = 0.3
    bottleneck: float = 0.5


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _shapes(d: ModelDims) -> dict[str, tuple[int, ...]]:
    E, H, D, A = d.emb, d.enc_hidden, d.dec_hidden, d.annotation
    s = {
        "src_emb": (d.src_vocab, E),
        "tgt_emb": (d.tgt_vocab, E),
    }
    for name, n_in, n_h in (("enc_fwd", E, H), ("enc_bwd", E, H), ("dec_gru1", E, D), ("dec_gru2", D, D)):
        s[f"{name}.Wx"] = (n_in, 3 * n_h)
        s[f"{name}.Wh"] = (n_h, 3 * n_h)
        s[f"{name}.bx"] = (3 * n_h,)
        s[f"{name}.bh"] = (3 * n_h,)
    s.update(
        {
            "att.W_h": (D, A),
            "att.W_s": (A, A),
            "att.W_a": (A, 1),
            "att.W_feat": (d.feat_dim, A),
            "att.W_c": (A, D),
            "W_bot": (D, d.bottleneck),
            "b_bot": (d.bottleneck,),
            "W_proj": (d.bottleneck, d.tgt_vocab),
            "b_proj": (d.tgt_vocab,),
        }
    )
    return s


class ModelQParams:
    """All weights of the translation model, keyed by name."""

    def __init__(self, dims: ModelDims, tensors: dict[str, Tensor]):
        expected = _shapes(dims)
        if set(expected) != set(tensors):
            raise ModelError(f"parameter names differ: {sorted(set(expected) ^ set(tensors))}")
        for k, shp in expected.items():
            if tensors[k].shape != shp:
                raise ModelError(f"parameter {k} has shape {tensors[k].shape}, expected {shp}")
        self.dims = dims
        self.tensors = tensors

    @classmethod
    def init(cls, dims: ModelDims, rng: np.random.Generator) -> "ModelQParams":
        tensors = {}
        for name, shp in _shapes(dims).items():
            if len(shp) == 1:
                arr = np.zeros(shp)
            else:
                arr = glorot(rng, *shp)
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(dims, tensors)

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def copy(self) -> "ModelQParams":
        return ModelQParams(
            self.dims,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )


# ---------------------------------------------------------------------------
# building blocks


def gru_cell(x: Tensor, h: Tensor, p: ModelQParams, prefix: str) -> Tensor:
    """Standard GRU transition with reset/update gates.

    r = σ(x Wx_r + bx_r + h Wh_r + bh_r), z likewise,
    n = tanh(x Wx_n + bx_n + r ⊙ (h Wh_n + bh_n)),  h' = (1 − z) ⊙ n + z ⊙ h.
    """
    gx = ad.affine(x, p[f"{prefix}.Wx"], p[f"{prefix}.bx"])
    gh = ad.affine(h, p[f"{prefix}.Wh"], p[f"{prefix}.bh"])
    n_h = h.shape[-1]
    rz = ad.sigmoid(ad.getitem(gx, (..., slice(0, 2 * n_h))) + ad.getitem(gh, (..., slice(0, 2 * n_h))))
    r = ad.getitem(rz, (..., slice(0, n_h)))
    z = ad.getitem(rz, (..., slice(n_h, 2 * n_h)))
    n = ad.tanh(ad.getitem(gx, (..., slice(2 * n_h, None))) + r * ad.getitem(gh, (..., slice(2 * n_h, None))))
    return n + z * (h - n)


def _carry(new: Tensor, old: Tensor, m: np.ndarray | None) -> Tensor:
    """Keep ``old`` where the step mask is 0 (padding)."""
    if m is None or m.all():
        return new
    mk = Tensor._wrap(m[:, None].astype(np.float64))
    return old + mk * (new - old)


def _check_ids(ids: np.ndarray, vocab: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ModelError(f"{what} id out of vocabulary range [0, {vocab})")


def encode(
    p: ModelQParams,
    x: np.ndarray,
    mask: np.ndarray | None = None,
    train: bool = False,
    dropouts: Dropouts | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Bidirectional GRU annotations.

    ``x`` is (T,) or (B, T) of token ids; returns (T, 2H) or (B, T, 2H).
    Row t concatenates the forward state after x_1..x_t with the backward
    state after x_T..x_t.  Padding is skipped by carrying states through it.
    """
    x = np.asarray(x, dtype=np.int64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        mask = None if mask is None else np.asarray(mask)[None, :]
    if x.shape[1] == 0:
        raise ModelError("cannot encode an empty source sequence")
    _check_ids(x, p.dims.src_vocab, "source")
    if mask is None:
        mask = (x != PAD).astype(np.float64) if (x == PAD).any() else np.ones(x.shape)
    dropouts = dropouts or Dropouts()
    B, T = x.shape
    H = p.dims.enc_hidden
    emb = ad.take_rows(p["src_emb"], x)
    emb = ad.dropout(emb, dropouts.emb, rng, train)
    steps = [ad.getitem(emb, (slice(None), t)) for t in range(T)]
    h = Tensor._wrap(np.zeros((B, H)))
    fwd = []
    for t in range(T):
        h = _carry(gru_cell(steps[t], h, p, "enc_fwd"), h, mask[:, t])
        fwd.append(h)
    h = Tensor._wrap(np.zeros((B, H)))
    bwd = [None] * T
    for t in reversed(range(T)):
        h = _carry(gru_cell(steps[t], h, p, "enc_bwd"), h, mask[:, t])
        bwd[t] = h
    S = ad.concat([ad.stack(fwd, axis=1), ad.stack(bwd, axis=1)], axis=-1)
    S = ad.dropout(S, dropouts.annotations, rng, train)
    if single:
        S = ad.getitem(S, 0)
    return S


def visual_gate(p: ModelQParams, v, use_visual: bool = True) -> Tensor:
    """i_t = tanh(v W_feat); with ``use_visual=False`` the gate is the identity (all ones)."""
    v = ad.as_tensor(v)
    if v.shape[-1] != p.dims.feat_dim:
        raise ModelError(f"feature dimension mismatch: expected {p.dims.feat_dim}, got {v.shape[-1]}")
    if not use_visual:
        return Tensor._wrap(np.ones(v.shape[:-1] + (p.dims.annotation,)))
    return ad.tanh(ad.affine(v, p["att.W_feat"]))


@dataclass
class AttentionCache:
    """Per-sentence quantities that do not change across decoder steps."""

    S: Tensor
    S_proj: Tensor
    mask: np.ndarray
    gate: Tensor


def prepare_attention(p: ModelQParams, S: Tensor, v, mask=None, use_visual: bool = True) -> AttentionCache:
    single = S.ndim == 2
    if single:
        S = ad.reshape(S, (1,) + S.shape)
        v = ad.reshape(ad.as_tensor(v), (1, -1))
    m = np.ones(S.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64).reshape(S.shape[:2])
    if not (m > 0).any(axis=1).all():
        raise ModelError("attention: every annotation row is masked")
    return AttentionCache(S, ad.affine(S, p["att.W_s"]), m, visual_gate(p, v, use_visual))


def attend(p: ModelQParams, h_prime: Tensor, cache: AttentionCache, return_weights: bool = False):
    """c_t = W_c (c'_t ⊙ i_t) with a_t = softmax(W_a tanh(W_h h' + W_s S))."""
    B, T, A = cache.S.shape
    hp = ad.affine(h_prime, p["att.W_h"])
    e = ad.tanh(cache.S_proj + ad.reshape(hp, (B, 1, A)))
    scores = ad.reshape(ad.affine(e, p["att.W_a"]), (B, T))
    a = ad.softmax(scores, mask=cache.mask > 0)
    ctx = ad.sum_(ad.reshape(a, (B, T, 1)) * cache.S, axis=1)
    c = ad.affine(ctx * cache.gate, p["att.W_c"])
    if return_weights:
        return c, a
    return c


def attend_single(p: ModelQParams, h_prime, v, S, mask=None, use_visual: bool = True):
    """Convenience form of :func:`attend` for one sentence: returns (c_t, a_t)."""
    h_prime = ad.as_tensor(h_prime)
    cache = prepare_attention(p, ad.as_tensor(S), v, mask, use_visual)
    c, a = attend(p, ad.reshape(h_prime, (1, -1)), cache, return_weights=True)
    return ad.getitem(c, 0), ad.getitem(a, 0)


@dataclass
class DecoderState:
    h: Tensor
    prev_y: np.ndarray
    cache: AttentionCache


def init_state(p: ModelQParams, cache: AttentionCache) -> DecoderState:
    B = cache.S.shape[0]
    return DecoderState(Tensor._wrap(np.zeros((B, p.dims.dec_hidden))), np.full(B, BOS), cache)


def _bottleneck(p: ModelQParams, h: Tensor, train: bool, dropouts: Dropouts, rng) -> Tensor:
    b = ad.tanh(ad.affine(h, p["W_bot"], p["b_bot"]))
    return ad.dropout(b, dropouts.bottleneck, rng, train)


def cgru_step(p: ModelQParams, y_emb: Tensor, h: Tensor, cache: AttentionCache) -> Tensor:
    h1 = gru_cell(y_emb, h, p, "dec_gru1")
    c = attend(p, h1, cache)
    return gru_cell(c, h1, p, "dec_gru2")


def decode_step(
    p: ModelQParams,
    prev_y,
    state: DecoderState,
    train: bool = False,
    dropouts: Dropouts | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, DecoderState]:
    """One conditional-GRU step; returns (p_t over the target vocabulary, new state)."""
    dropouts = dropouts or Dropouts()
    y = np.asarray(prev_y, dtype=np.int64).reshape(-1)
    _check_ids(y, p.dims.tgt_vocab, "target")
    emb = ad.dropout(ad.take_rows(p["tgt_emb"], y), dropouts.emb, rng, train)
    h = cgru_step(p, emb, state.h, state.cache)
    b = _bottleneck(p, h, train, dropouts, rng)
    probs = ad.softmax(ad.affine(b, p["W_proj"], p["b_proj"]))
    return probs, DecoderState(h, y, state.cache)


def translation_loss(target, distributions: Sequence, counter: list | None = None) -> Tensor:
    """Σ_t −log p_t[y_t] over non-PAD target positions.

    ``target`` is (T,) or (B, T); ``distributions`` is a length-T sequence of
    (V,) or (B, V) probability tensors.  Gold probabilities below 1e-12 are
    floored; each occurrence is appended to ``counter`` when given.
    """
    y = np.asarray(target, dtype=np.int64)
    if y.ndim == 1:
        y = y[:, None] if len(distributions) and ad.as_tensor(distributions[0]).ndim == 2 else y
    if y.ndim == 1:
        y = y[None, :]
        distributions = [ad.reshape(ad.as_tensor(d), (1, -1)) for d in distributions]
    if y.shape[1] != len(distributions):
        raise ModelError(f"{len(distributions)} distributions for {y.shape[1]} target positions")
    total = None
    for t, dist in enumerate(distributions):
        m = y[:, t] != PAD
        if not m.any():
            continue
        gold = ad.pick(dist, np.where(m, y[:, t], 0))
        low = int(((gold.data < LOG_FLOOR) & m).sum())
        if low and counter is not None:
            counter.append(low)
        term = ad.sum_(ad.log(gold, floor=LOG_FLOOR) * Tensor._wrap(m.astype(np.float64)))
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return -total


# ---------------------------------------------------------------------------
# batched teacher-forced forward pass


@dataclass
class ForwardResult:
    loss: Tensor          # summed negative log-likelihood over the batch
    h_T: Tensor           # (B, D) final decoder state per sentence
    n_tokens: int
    floor_hits: int = 0
    logits: Tensor | None = field(default=None, repr=False)


def forward_batch(
    p: ModelQParams,
    src: np.ndarray,
    src_mask: np.ndarray,
    tgt: np.ndarray,
    tgt_mask: np.ndarray,
    feats,
    train: bool = False,
    dropouts: Dropouts | None = None,
    rng: np.random.Generator | None = None,
    use_visual: bool = True,
) -> ForwardResult:
    """Teacher-forced pass over a padded batch.

    ``tgt`` holds gold tokens ending with EOS; decoder inputs are BOS followed
    by ``tgt[:, :-1]``.  Padding rows keep their decoder state, so ``h_T`` is
    the state after each sentence's final (EOS) step.
    """
    dropouts = dropouts or Dropouts()
    tgt = np.asarray(tgt, dtype=np.int64)
    _check_ids(tgt, p.dims.tgt_vocab, "target")
    B, T = tgt.shape
    S = encode(p, src, src_mask, train, dropouts, rng)
    cache = prepare_attention(p, S, feats, src_mask, use_visual)
    y_in = np.concatenate([np.full((B, 1), BOS), tgt[:, :-1]], axis=1)
    emb = ad.dropout(ad.take_rows(p["tgt_emb"], y_in), dropouts.emb, rng, train)
    h = Tensor._wrap(np.zeros((B, p.dims.dec_hidden)))
    states = []
    for t in range(T):
        h_new = cgru_step(p, ad.getitem(emb, (slice(None), t)), h, cache)
        h = _carry(h_new, h, tgt_mask[:, t])
        states.append(h_new)
    H = ad.stack(states, axis=1)
    b = _bottleneck(p, H, train, dropouts, rng)
    logits = ad.affine(b, p["W_proj"], p["b_proj"])
    probs = ad.softmax(logits)
    gold = ad.pick(probs, np.where(tgt_mask > 0, tgt, 0))
    m = (tgt_mask > 0)
    hits = int(((gold.data < LOG_FLOOR) & m).sum())
    if hits:
        log.debug("translation loss: %d gold probabilities floored at %g", hits, LOG_FLOOR)
    nll = -ad.sum_(ad.log(gold, floor=LOG_FLOOR) * Tensor._wrap(m.astype(np.float64)))
    return ForwardResult(nll, h, int(m.sum()), hits, logits)


# ---------------------------------------------------------------------------
# decoding


def _check_ensemble(models: Sequence[ModelQParams]) -> None:
    if not models:
        raise ModelError("need at least one model")
    d0 = models[0].dims
    for m in models[1:]:
        if m.dims != d0:
            raise ModelError("ensemble members differ in vocabularies or dimensions")


def _ensemble_probs(models, prev, states):
    outs = []
    new_states = []
    for m, st in zip(models, states):
        pr, ns = decode_step(m, prev, st)
        outs.append(pr.data)
        new_states.append(ns)
    probs = outs[0] if len(outs) == 1 else np.mean(outs, axis=0)
    return probs, new_states


def _start(models, x, v, use_visual):
    states = []
    for m in models:
        S = encode(m, np.asarray(x)[None, :])
        cache = prepare_attention(m, S, np.asarray(v, dtype=np.float64).reshape(1, -1), None, use_visual)
        states.append(init_state(m, cache))
    return states


def final_state(p: ModelQParams, x, v, y: Sequence[int], use_visual: bool = True) -> Tensor:
    """Decoder state after feeding BOS, y (which should end with EOS)."""
    (state,) = _start([p], x, v, use_visual)
    prev = BOS
    h = state.h
    for tok in y:
        _, state = decode_step(p, [prev], state)
        h = state.h
        prev = tok
    return ad.getitem(h, 0)


def translate(
    x,
    v,
    models: ModelQParams | Sequence[ModelQParams],
    mode: str = "greedy",
    beam: int = 1,
    max_len: int = 50,
    use_visual: bool = True,
) -> tuple[list[int], np.ndarray]:
    """Decode one source sentence; returns (token ids without EOS, h_T).

    Ensembles average per-step probability vectors.  Under beam search or
    ensembling, h_T is obtained by re-running the winning hypothesis through
    the first model.
    """
    if isinstance(models, ModelQParams):
        models = [models]
    _check_ensemble(models)
    x = np.asarray(x, dtype=np.int64)
    with ad.no_grad():
        if mode == "greedy" or beam == 1:
            out, h = _greedy(models, x, v, max_len, use_visual)
            if len(models) > 1:
                h = final_state(models[0], x, v, _closed(out, max_len), use_visual).data
            return out, h
        if mode != "beam":
            raise ModelError(f"unknown decoding mode '{mode}'")
        out = _beam(models, x, v, beam, max_len, use_visual)
        h = final_state(models[0], x, v, _closed(out, max_len), use_visual).data
        return out, h


def _closed(out: list[int], max_len: int) -> list[int]:
    # a hypothesis cut at max_len never consumed its own last token
    return out if len(out) >= max_len else out + [EOS]


def _greedy(models, x, v, max_len, use_visual):
    states = _start(models, x, v, use_visual)
    prev = BOS
    out: list[int] = []
    for _ in range(max_len):
        probs, states = _ensemble_probs(models, [prev], states)
        tok = int(np.argmax(probs[0]))
        if tok == EOS:
            break
        out.append(tok)
        prev = tok
    return out, states[0].h.data[0].copy()


def _beam(models, x, v, k, max_len, use_visual):
    states = _start(models, x, v, use_visual)
    # (score sum, tokens, states, finished)
    beams = [(0.0, [], states)]
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        candidates = []
        for score, toks, sts in beams:
            prev = toks[-1] if toks else BOS
            probs, new_sts = _ensemble_probs(models, [prev], sts)
            logp = np.log(np.maximum(probs[0], LOG_FLOOR))
            top = np.argsort(-logp, kind="stable")[:k]
            for tok in top:
                candidates.append((score + float(logp[tok]), toks + [int(tok)], new_sts))
        candidates.sort(key=lambda c: -c[0] / len(c[1]))
        beams = []
        for score, toks, sts in candidates:
            if toks[-1] == EOS:
                finished.append((score / len(toks), toks[:-1]))
            else:
                beams.append((score, toks, sts))
            if len(beams) == k:
                break
        if len(finished) >= k or not beams:
            break
    if not finished:
        finished = [(s / len(t), t) for s, t, _ in beams]
    finished.sort(key=lambda f: -f[0])
    return finished[0][1]


def greedy_batch(
    models: ModelQParams | Sequence[ModelQParams],
    src: np.ndarray,
    src_mask: np.ndarray,
    feats,
    max_len: int = 50,
    use_visual: bool = True,
) -> list[list[int]]:
    """Greedy decoding of a padded batch; same outputs as per-sentence :func:`translate`."""
    if isinstance(models, ModelQParams):
        models = [models]
    _check_ensemble(models)
    B = src.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    with ad.no_grad():
        states = []
        for m in models:
            S = encode(m, src, src_mask)
            states.append(init_state(m, prepare_attention(m, S, feats, src_mask, use_visual)))
        prev = np.full(B, BOS)
        for _ in range(max_len):
            probs, states = _ensemble_probs(models, prev, states)
            tok = probs.argmax(axis=-1)
            for i in np.flatnonzero(~done):
                if tok[i] == EOS:
                    done[i] = True
                else:
                    out[i].append(int(tok[i]))
            if done.all():
                break
            prev = np.where(done, EOS, tok)
    return out
