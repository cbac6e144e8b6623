"""Joint training of the translation model with the visual reconstruction pipeline.

Per batch (after one teacher-forced forward pass):

1. critic update(s): ``lambda_critic`` for g-wgan, one for q-waae;
2. generator + translation-model update on the auxiliary loss;
3. translation-model update on the translation loss.

Every update touching the translation model is clipped to ``clip_norm``.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import adversarial as adv
from . import autodiff as ad
from . import model as mq
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import FeatureStore, ParallelCorpus, encode_corpus, make_batches, pad
from .metrics import bleu, grounding_accuracy
from .optim import AdamState, adam_step
from .vocab import Vocabulary

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss_q", "train_aux", "valid_bleu", "amb_acc", "seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "none"
    lambda_a: float = 0.2
    lambda_r: float = 0.2
    lambda_gp: float = 10.0
    lambda_critic: int = 5
    noise_dim: int = 128
    gen_dropout: float = 0.3
    paper_literal_signs: bool = False
    use_visual: bool = True
    preset: str = "desk"
    batch_size: int = 32
    clip_norm: float = 1.0
    patience: int = 5
    max_epochs: int = 50
    min_epochs: int = 0
    seed: int = 0
    lr_q: float = 4e-4
    lr_d: float = 2e-4
    dropout_emb: float = 0.3
    dropout_ann: float = 0.3
    dropout_bot: float = 0.5
    max_len: int = 50
    train_src: str = ""
    train_tgt: str = ""
    train_feat: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    valid_feat: str = ""
    valid_amb: str = ""
    out_dir: str = ""

    def validate(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        self.adv_config().validate()

    def adv_config(self) -> adv.AdvConfig:
        return adv.AdvConfig(
            variant=self.variant,
            lambda_a=self.lambda_a,
            lambda_r=self.lambda_r,
            lambda_gp=self.lambda_gp,
            lambda_critic=self.lambda_critic,
            noise_dim=self.noise_dim,
            gen_dropout=self.gen_dropout,
            paper_literal_signs=self.paper_literal_signs,
        )

    def dropouts(self) -> mq.Dropouts:
        return mq.Dropouts(self.dropout_emb, self.dropout_ann, self.dropout_bot)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class Dataset:
    """A parallel corpus with its features and (optionally) ambiguity annotations."""

    corpus: ParallelCorpus
    features: FeatureStore
    annotations: list[list[int]] | None = None

    def __post_init__(self):
        if len(self.corpus) > self.features.n:
            raise ValueError(
                f"corpus has {len(self.corpus)} sentences but the feature store {self.features.n} rows"
            )


@dataclass
class TrainLog:
    """Per-update instrumentation."""

    critic_updates_per_generator_update: list[int] = field(default_factory=list)
    q_update_norms: list[float] = field(default_factory=list)
    q_update_raw_norms: list[float] = field(default_factory=list)
    floor_hits: int = 0


# ---------------------------------------------------------------------------


class Trainer:
    RNG_STREAMS = ("init", "data", "dropout", "adv")

    def __init__(self, config: TrainConfig, train: Dataset, src_vocab: Vocabulary | None = None,
                 tgt_vocab: Vocabulary | None = None):
        config.validate()
        self.config = config
        self.train_data = train
        self.src_vocab = src_vocab or Vocabulary.build(train.corpus.src)
        self.tgt_vocab = tgt_vocab or Vocabulary.build(train.corpus.tgt)
        self.src_ids, self.tgt_ids = encode_corpus(train.corpus, self.src_vocab, self.tgt_vocab)
        seqs = np.random.SeedSequence(config.seed).spawn(len(self.RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(self.RNG_STREAMS, seqs)}
        self.dims = mq.ModelDims.preset(config.preset, len(self.src_vocab), len(self.tgt_vocab),
                                        feat_dim=train.features.d)
        self.adv_config = config.adv_config()
        self.q = mq.ModelQParams.init(self.dims, self.rngs["init"])
        self.adv = adv.AdvParams.init(self.adv_config, self.dims.dec_hidden, self.dims.feat_dim, self.rngs["init"])
        self.adam_q = AdamState(lr=config.lr_q)
        self.adam_d = AdamState(lr=config.lr_d, beta1=0.5, beta2=0.9)
        self.dropouts = config.dropouts()
        self.epoch = 0
        self.best_score = float("-inf")
        self.bad_epochs = 0
        self.best_q: dict[str, np.ndarray] | None = None
        self.best_adv: dict[str, np.ndarray] | None = None
        self.metrics: list[dict[str, Any]] = []
        self.log = TrainLog()

    # -- parameter bookkeeping ------------------------------------------
    def named_q(self) -> dict[str, Tensor]:
        return {f"Q.{k}": t for k, t in self.q.tensors.items()}

    def named_gen(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.adv.tensors.items() if k.startswith("G.")}

    def named_critic(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.adv.tensors.items() if k.startswith("D.")}

    def all_named(self) -> dict[str, Tensor]:
        return {**self.named_q(), **self.adv.tensors}

    def _zero_grads(self) -> None:
        for t in self.all_named().values():
            t.grad = None

    def _grads(self, loss: ad.Tensor, params: dict[str, Tensor], retain: bool, term: str) -> dict[str, np.ndarray]:
        if not np.isfinite(loss.data).all():
            raise TrainingError(f"non-finite {term} at epoch {self.epoch + 1}")
        self._zero_grads()
        ad.backward(loss, retain_graph=retain)
        # unreached parameters are skipped, not fed zeros, so Adam momentum leaves them alone
        return {k: t.grad for k, t in params.items() if t.grad is not None}

    def _update_q(self, grads: dict[str, np.ndarray]) -> None:
        raw = ad.global_norm(grads)
        clipped = ad.clip_gradient_norm(grads, self.config.clip_norm)
        self.log.q_update_raw_norms.append(raw)
        self.log.q_update_norms.append(ad.global_norm(clipped))
        adam_step(self.all_named(), clipped, self.adam_q)

    # -- one batch -------------------------------------------------------
    def step(self, batch) -> tuple[float, float]:
        """Run all updates for one batch; returns (per-sentence L_Q, auxiliary loss)."""
        cfg, acfg = self.config, self.adv_config
        rd, ra = self.rngs["dropout"], self.rngs["adv"]
        res = mq.forward_batch(
            self.q, batch.src, batch.src_mask, batch.tgt, batch.tgt_mask, batch.feats,
            train=True, dropouts=self.dropouts, rng=rd, use_visual=cfg.use_visual,
        )
        self.log.floor_hits += res.floor_hits
        B = len(batch)
        loss_q = res.loss * (1.0 / B)
        h_T = res.h_T
        v = ad.Tensor._wrap(batch.feats)
        aux_value = 0.0
        q_and_g = {**self.named_q(), **self.named_gen()}

        aux = None
        if acfg.variant == "regression-only":
            aux = adv.reconstruction_loss(self.adv, h_T, v, acfg.lambda_r)
        elif acfg.variant == "q-waae":
            h_prior = ra.standard_normal(h_T.shape)
            c_loss = adv.waae_critic_loss(self.adv, h_T, h_prior, acfg.lambda_gp, ra)
            adam_step(self.adv.tensors, self._grads(c_loss, self.named_critic(), False, "critic loss"), self.adam_d)
            self.log.critic_updates_per_generator_update.append(1)
            v_fake = adv.generate_waae(self.adv, h_T)
            aux = adv.waae_encoder_loss(self.adv, h_T, v, v_fake, acfg.lambda_a, acfg.lambda_r)
        elif acfg.variant == "g-wgan":
            n_critic = 0
            h_c = h_T.detach()
            for _ in range(acfg.lambda_critic):
                z = ra.standard_normal((B, acfg.noise_dim))
                with ad.no_grad():
                    fake = adv.generate_wgan(self.adv, z, h_c, acfg.gen_dropout, ra, True)
                c_loss, _ = adv.wgan_losses(self.adv, v, fake, h_c, acfg.lambda_a, acfg.lambda_gp, ra,
                                            acfg.paper_literal_signs)
                adam_step(self.adv.tensors, self._grads(c_loss, self.named_critic(), False, "critic loss"),
                          self.adam_d)
                n_critic += 1
            self.log.critic_updates_per_generator_update.append(n_critic)
            z = ra.standard_normal((B, acfg.noise_dim))
            v_fake = adv.generate_wgan(self.adv, z, h_T, acfg.gen_dropout, ra, True)
            d_gen = ad.mean(adv.critic_on_pair(self.adv, v_fake, h_T))
            sign = 1.0 if acfg.paper_literal_signs else -1.0
            aux = d_gen * (sign * acfg.lambda_a)

        if aux is not None:
            aux_value = float(aux.data)
            grads = self._grads(aux, q_and_g, True, "auxiliary loss")
            self._update_q(grads)

        grads = self._grads(loss_q, self.named_q(), False, "translation loss")
        self._update_q(grads)
        return float(loss_q.data), aux_value

    # -- epochs ----------------------------------------------------------
    def run_epoch(self) -> tuple[float, float]:
        seed = int(self.rngs["data"].integers(0, 2**31 - 1))
        batches = make_batches(self.src_ids, self.tgt_ids, self.train_data.features, self.config.batch_size, seed)
        lq = la = 0.0
        n = 0
        for b in batches:
            q, a = self.step(b)
            lq += q * len(b)
            la += a * len(b)
            n += len(b)
        return lq / n, la / n

    def translate_dataset(self, data: Dataset, params: mq.ModelQParams | None = None,
                          batch_size: int = 64) -> list[list[str]]:
        params = params or self.q
        src = [self.src_vocab.encode(s) for s in data.corpus.src]
        hyps: list[list[str]] = [None] * len(src)  # type: ignore[list-item]
        order = np.argsort([len(s) for s in src], kind="stable")
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            ids, mask = pad([src[j] for j in idx])
            outs = mq.greedy_batch(params, ids, mask, data.features.rows(idx), self.config.max_len,
                                   self.config.use_visual)
            for j, o in zip(idx, outs):
                hyps[j] = self.tgt_vocab.decode(o)
        return hyps

    def evaluate(self, data: Dataset, params: mq.ModelQParams | None = None) -> tuple[float, float | None]:
        hyps = self.translate_dataset(data, params)
        refs = data.corpus.tgt
        score = bleu(refs, hyps)
        acc = None
        if data.annotations is not None and any(data.annotations):
            acc = grounding_accuracy(hyps, refs, data.annotations)
        return score, acc

    def fit(self, valid: Dataset, checkpoint_dir: str | Path | None = None, stop_after: int | None = None,
            log_timing: bool = True) -> list[dict[str, Any]]:
        """Train until early stopping or ``max_epochs``.

        ``stop_after`` interrupts after that many total epochs (for resume tests).
        """
        cfg = self.config
        ckdir = Path(checkpoint_dir) if checkpoint_dir else None
        if ckdir:
            ckdir.mkdir(parents=True, exist_ok=True)
        while self.epoch < cfg.max_epochs:
            if stop_after is not None and self.epoch >= stop_after:
                break
            t0 = time.perf_counter()
            hits = self.log.floor_hits
            lq, la = self.run_epoch()
            if self.log.floor_hits > hits:
                log.info("epoch %d: %d gold probabilities floored", self.epoch + 1, self.log.floor_hits - hits)
            score, acc = self.evaluate(valid)
            self.epoch += 1
            row = {
                "epoch": self.epoch,
                "train_loss_q": lq,
                "train_aux": la,
                "valid_bleu": score,
                "amb_acc": acc,
                "seconds": time.perf_counter() - t0 if log_timing else None,
            }
            self.metrics.append(row)
            log.info("epoch %d  L_Q %.4f  aux %.4f  BLEU %.2f", self.epoch, lq, la, 100 * score)
            if score > self.best_score:
                self.best_score = score
                self.bad_epochs = 0
                self.best_q = {k: t.data.copy() for k, t in self.q.tensors.items()}
                self.best_adv = {k: t.data.copy() for k, t in self.adv.tensors.items()}
                if ckdir:
                    save_checkpoint(ckdir / "best.ckpt", self.checkpoint(best=True))
            else:
                self.bad_epochs += 1
            if ckdir:
                save_checkpoint(ckdir / "last.ckpt", self.checkpoint())
                write_metrics_log(ckdir / "metrics.tsv", self.metrics)
            if self.bad_epochs >= cfg.patience and self.epoch >= cfg.min_epochs:
                log.info("early stop after %d epochs without improvement", self.bad_epochs)
                break
        return self.metrics

    def best_params(self) -> mq.ModelQParams:
        if self.best_q is None:
            return self.q
        return mq.ModelQParams(self.dims, {k: ad.Tensor(v) for k, v in self.best_q.items()})

    # -- persistence -----------------------------------------------------
    def checkpoint(self, best: bool = False) -> Checkpoint:
        qsrc = self.best_q if best and self.best_q is not None else {k: t.data for k, t in self.q.tensors.items()}
        asrc = self.best_adv if best and self.best_adv is not None else {k: t.data for k, t in self.adv.tensors.items()}
        extra = {}
        if not best and self.best_q is not None:
            extra = {f"best/{k}": v for k, v in self.best_q.items()}
            extra.update({f"bestadv/{k}": v for k, v in self.best_adv.items()})
        return Checkpoint(
            model_dims=dataclasses.asdict(self.dims),
            model={k: np.array(v) for k, v in qsrc.items()},
            adv_variant=self.adv.variant,
            adv={**{k: np.array(v) for k, v in asrc.items()}, **extra},
            adam_q=self.adam_q,
            adam_d=self.adam_d,
            src_vocab=list(self.src_vocab.tokens),
            tgt_vocab=list(self.tgt_vocab.tokens),
            epoch=self.epoch,
            best_score=self.best_score,
            bad_epochs=self.bad_epochs,
            rng_states={k: r.bit_generator.state for k, r in self.rngs.items()},
            config=self.config.to_dict(),
            metrics=list(self.metrics),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        """Resume from a ``last.ckpt`` produced by :meth:`fit`."""
        if ckpt.src_vocab != self.src_vocab.tokens or ckpt.tgt_vocab != self.tgt_vocab.tokens:
            raise TrainingError("checkpoint vocabularies differ from the training data")
        for k, t in self.q.tensors.items():
            t.data = ckpt.model[k].copy()
        best_q = {k[5:]: v for k, v in ckpt.adv.items() if k.startswith("best/")}
        best_adv = {k[8:]: v for k, v in ckpt.adv.items() if k.startswith("bestadv/")}
        for k, t in self.adv.tensors.items():
            t.data = ckpt.adv[k].copy()
        self.best_q = {k: v.copy() for k, v in best_q.items()} or None
        self.best_adv = {k: v.copy() for k, v in best_adv.items()} if self.best_q is not None else None
        self.adam_q = _copy_adam(ckpt.adam_q)
        self.adam_d = _copy_adam(ckpt.adam_d)
        self.epoch = ckpt.epoch
        self.best_score = ckpt.best_score
        self.bad_epochs = ckpt.bad_epochs
        for k, st in ckpt.rng_states.items():
            self.rngs[k].bit_generator.state = st
        self.metrics = [dict(m) for m in ckpt.metrics]


def _copy_adam(st: AdamState) -> AdamState:
    return AdamState(st.lr, st.beta1, st.beta2, st.eps, st.step,
                     {k: v.copy() for k, v in st.m.items()}, {k: v.copy() for k, v in st.v.items()})


Tensor = ad.Tensor


def params_from_checkpoint(ckpt: Checkpoint) -> mq.ModelQParams:
    dims = mq.ModelDims(**ckpt.model_dims)
    return mq.ModelQParams(dims, {k: ad.Tensor(v) for k, v in ckpt.model.items()})


# ---------------------------------------------------------------------------
# metrics log


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def format_metrics_log(rows: Sequence[dict[str, Any]], include_time: bool = True) -> str:
    cols = METRICS_HEADER if include_time else METRICS_HEADER[:-1]
    lines = ["\t".join(cols)]
    for r in rows:
        vals = [r["epoch"], r["train_loss_q"], r["train_aux"], 100.0 * r["valid_bleu"],
                None if r["amb_acc"] is None else 100.0 * r["amb_acc"]]
        if include_time:
            vals.append(r["seconds"])
        lines.append("\t".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def write_metrics_log(path, rows, include_time: bool = True) -> None:
    Path(path).write_text(format_metrics_log(rows, include_time), encoding="utf-8")


# ---------------------------------------------------------------------------
# entry points


def train(
    config: TrainConfig,
    train_data: Dataset,
    valid_data: Dataset,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
    log_timing: bool = True,
) -> tuple[Trainer, Checkpoint]:
    """Train one model; returns the trainer and a checkpoint of its best parameters."""
    trainer = Trainer(config, train_data)
    if resume_from is not None:
        trainer.restore(load_checkpoint(resume_from))
    trainer.fit(valid_data, checkpoint_dir, stop_after=stop_after, log_timing=log_timing)
    return trainer, trainer.checkpoint(best=True)


ABLATION_ROWS = (
    ("Baseline", dict(variant="none", use_visual=True)),
    ("Baseline + G + no v", dict(variant="regression-only", use_visual=False)),
    ("Baseline + G", dict(variant="regression-only", use_visual=True)),
    ("Q-WAAE + no v", dict(variant="q-waae", use_visual=False)),
    ("Q-WAAE", dict(variant="q-waae", use_visual=True)),
)


@dataclass
class AblationReport:
    rows: list[dict[str, Any]]

    def table(self) -> str:
        cols = ("configuration", "seed", "bleu", "amb_acc", "epochs")
        lines = ["\t".join(cols)]
        for r in self.rows:
            acc = "-" if r["amb_acc"] is None else f"{100 * r['amb_acc']:.2f}"
            lines.append(f"{r['configuration']}\t{r['seed']}\t{100 * r['bleu']:.2f}\t{acc}\t{r['epochs']}")
        return "\n".join(lines) + "\n"

    def mean(self, configuration: str, key: str) -> float:
        vals = [r[key] for r in self.rows if r["configuration"] == configuration]
        return float(np.mean(vals))

    def configurations(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r["configuration"] not in seen:
                seen.append(r["configuration"])
        return seen


def run_ablation(
    base: TrainConfig,
    train_data: Dataset,
    valid_data: Dataset,
    test_data: Dataset,
    seeds: Sequence[int] = (0,),
    rows: Sequence[str] | None = None,
) -> AblationReport:
    """Train the ablation configurations with shared data and seeds; score on ``test_data``."""
    wanted = [r for r in ABLATION_ROWS if rows is None or r[0] in rows]
    out = []
    for name, overrides in wanted:
        for seed in seeds:
            cfg = base.replace(seed=seed, **overrides)
            trainer, _ = train(cfg, train_data, valid_data, log_timing=False)
            score, acc = trainer.evaluate(test_data, trainer.best_params())
            out.append({"configuration": name, "seed": seed, "bleu": score, "amb_acc": acc,
                        "epochs": trainer.epoch})
            log.info("%s seed %d: BLEU %.2f acc %s", name, seed, 100 * score, acc)
    return AblationReport(out)


@dataclass
class SweepTable:
    rows: list[dict[str, Any]]

    def table(self) -> str:
        lines = ["lambda_a\tlambda_r\tseed\tbleu\tamb_acc"]
        for r in self.rows:
            acc = "-" if r["amb_acc"] is None else f"{100 * r['amb_acc']:.2f}"
            lines.append(f"{r['lambda_a']}\t{r['lambda_r']}\t{r['seed']}\t{100 * r['bleu']:.2f}\t{acc}")
        return "\n".join(lines) + "\n"

    def cell(self, lambda_a: float, lambda_r: float, key: str = "bleu") -> float:
        vals = [r[key] for r in self.rows if r["lambda_a"] == lambda_a and r["lambda_r"] == lambda_r]
        return float(np.mean(vals))


def run_lambda_sweep(
    base: TrainConfig,
    train_data: Dataset,
    valid_data: Dataset,
    test_data: Dataset | None = None,
    grid_a: Sequence[float] = (0.2, 0.5, 0.8),
    grid_r: Sequence[float] = (0.2, 0.5, 0.8),
    seeds: Sequence[int] = (0,),
) -> SweepTable:
    """Q-WAAE grid over (λ_a, λ_r); every cell shares seeds and data."""
    test_data = test_data or valid_data
    out = []
    for la in grid_a:
        for lr in grid_r:
            for seed in seeds:
                cfg = base.replace(variant="q-waae", lambda_a=la, lambda_r=lr, seed=seed)
                trainer, _ = train(cfg, train_data, valid_data, log_timing=False)
                score, acc = trainer.evaluate(test_data, trainer.best_params())
                out.append({"lambda_a": la, "lambda_r": lr, "seed": seed, "bleu": score, "amb_acc": acc})
    return SweepTable(out)
