"""Training orchestration for the diffusion predictor and the baseline.

A trainable model is a condition encoder plus a prediction network whose
parameter dicts share one flat namespace (``cond.*`` for the encoder).
Each step samples a batch of utterances with replacement, pads to the
batch maximum length, and masks both the network inputs and the loss
beyond each sequence's true length.  All randomness flows through a
single checkpointed stream, so an interrupted run resumed from its last
checkpoint finishes bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffusion, numerics as nm
from .baseline import BaselineConfig, BaselineNet, baseline_loss_graph
from .checkpoint import Checkpoint, load_checkpoint, rng_state_from_json, rng_state_to_json
from .config import Config, ConfigError, canonical_text
from .data import Corpus, NormStats, assign_splits, compute_norm_stats, normalize
from .denoiser import ConditionEncoder, ConditionEncoderConfig, Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, linear_schedule
from .numerics import Rng, Tape, Tensor
from .optim import Adam


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}; last checkpoint kept")
        self.step = step


def denoiser_config(config: Config) -> DenoiserConfig:
    d = config.denoiser
    return DenoiserConfig(
        channels=d.channels,
        layers=d.layers,
        kernel_size=d.kernel_size,
        dilation_cycle=tuple(d.dilation_cycle),
        cond_dim=d.cond_dim,
        step_hidden=d.step_hidden,
    )


def condition_config(config: Config) -> ConditionEncoderConfig:
    return ConditionEncoderConfig(
        vocab_size=config.data.vocab_size,
        embed_dim=config.condition.embed_dim,
        hidden=config.condition.hidden,
        cond_dim=config.denoiser.cond_dim,
    )


def baseline_config(config: Config) -> BaselineConfig:
    b = config.baseline
    return BaselineConfig(
        cond_dim=config.denoiser.cond_dim,
        width=b.width,
        kernel_size=b.kernel_size,
        dropout=b.dropout,
    )


def schedule_from_config(config: Config) -> NoiseSchedule:
    s = config.schedule
    return linear_schedule(s.steps, s.beta_start, s.beta_end)


@dataclass
class TrainableModel:
    """Condition encoder + prediction network over one parameter namespace."""

    kind: str
    cond: ConditionEncoder
    net: Denoiser | BaselineNet

    @property
    def params(self) -> dict[str, Tensor]:
        return {**self.cond.params, **self.net.params}

    def replace_params(self, new: dict[str, Tensor]) -> None:
        self.cond.params = {k: new[k] for k in self.cond.params}
        self.net.params = {k: new[k] for k in self.net.params}


def init_model(config: Config, kind: str, rng: Rng) -> TrainableModel:
    cond = ConditionEncoder.init(condition_config(config), rng)
    if kind == "ddpm":
        net = Denoiser.init(denoiser_config(config), rng)
    elif kind == "baseline":
        net = BaselineNet.init(baseline_config(config), rng)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return TrainableModel(kind=kind, cond=cond, net=net)


def model_from_checkpoint(ck: Checkpoint) -> TrainableModel:
    model = init_model(ck.config, ck.kind, Rng(0))
    expected = set(model.params)
    if expected != set(ck.params):
        raise ConfigError("checkpoint parameters do not match its config topology")
    model.replace_params(ck.params)
    return model


@dataclass
class PreparedCorpus:
    corpus: Corpus
    stats: NormStats
    token_ids: list[np.ndarray]
    targets: list[np.ndarray]  # model-space (length, 3) per train utterance


def prepare_corpus(config: Config, corpus: Corpus) -> PreparedCorpus:
    tagged = assign_splits(corpus, config.data.split_seed, config.data.holdout_fraction)
    max_id = max(max(u.tokens.ids) for u in tagged.utterances)
    if max_id >= config.data.vocab_size:
        raise ConfigError(
            f"corpus contains token id {max_id} but data.vocab_size is {config.data.vocab_size}"
        )
    stats = compute_norm_stats(tagged)
    train = tagged.subset("train")
    return PreparedCorpus(
        corpus=tagged,
        stats=stats,
        token_ids=[u.tokens.as_array() for u in train],
        targets=[normalize(u.prosody, stats) for u in train],
    )


def _assemble_batch(prep: PreparedCorpus, idxs: np.ndarray):
    lens = [len(prep.token_ids[i]) for i in idxs]
    lmax = max(lens)
    b = len(idxs)
    ids = np.zeros((b, lmax), dtype=np.int64)
    x0 = np.zeros((b, lmax, 3))
    mask = np.zeros((b, lmax))
    for row, (i, n) in enumerate(zip(idxs, lens)):
        ids[row, :n] = prep.token_ids[i]
        x0[row, :n] = prep.targets[i]
        mask[row, :n] = 1.0
    return ids, x0, mask


@dataclass
class TrainState:
    model: TrainableModel
    optimizer: Adam
    rng: Rng
    step: int


def make_checkpoint(config: Config, state: TrainState, stats: NormStats, seed) -> Checkpoint:
    opt = state.optimizer
    params = state.model.params
    return Checkpoint(
        kind=state.model.kind,
        config=config,
        step=state.step,
        params=params,
        stats=stats,
        rng_algorithm=state.rng.algorithm,
        rng_seed_json=json.dumps(seed),
        rng_state_json=rng_state_to_json(state.rng.state()),
        opt_t=opt.t,
        # Moment buffers are updated in place by Adam; snapshot copies.
        opt_m={k: v.copy() for k, v in opt.m.items()},
        opt_v={k: v.copy() for k, v in opt.v.items()},
    )


def train_model(
    config: Config,
    corpus: Corpus,
    kind: str,
    resume: Checkpoint | None = None,
    steps: int | None = None,
    on_checkpoint=None,
    on_log=None,
) -> tuple[Checkpoint, list[tuple[int, float]]]:
    """Run the training loop; returns the final checkpoint and loss log.

    ``on_checkpoint`` receives periodic checkpoints (including the one
    that is kept when the loss diverges); ``on_log`` receives
    ``(step, loss)`` rows at the configured cadence.
    """
    prep = prepare_corpus(config, corpus)
    sched = schedule_from_config(config) if kind == "ddpm" else None
    total_steps = config.train.steps if steps is None else steps
    opt_cfg = config.optimizer
    optimizer = Adam(lr=opt_cfg.lr, beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps)
    frozen: frozenset[str] = frozenset()

    if resume is not None:
        if resume.kind != kind:
            raise ConfigError(f"checkpoint is a {resume.kind!r} model, requested {kind!r}")
        if canonical_text(resume.config) != canonical_text(config):
            raise ConfigError("checkpoint config conflicts with the requested config")
        if not resume.stats.equals(prep.stats):
            raise ConfigError("checkpoint normalization statistics do not match the corpus")
        model = model_from_checkpoint(resume)
        rng = Rng(config.train.seed)
        rng.set_state(rng_state_from_json(resume.rng_state_json))
        optimizer.load_state(
            resume.opt_t, [(k, resume.opt_m[k], resume.opt_v[k]) for k in resume.opt_m]
        )
        start_step = resume.step
    else:
        rng = Rng(config.train.seed)
        model = init_model(config, kind, rng)
        start_step = 0

    if config.condition.init_from:
        donor = load_checkpoint(config.condition.init_from)
        if resume is None:
            _adopt_condition(model, donor, prep.stats)
        if config.condition.freeze:
            frozen = frozenset(model.cond.params)

    state = TrainState(model=model, optimizer=optimizer, rng=rng, step=start_step)
    log: list[tuple[int, float]] = []
    batch = opt_cfg.batch_size
    n_train = len(prep.token_ids)

    for step in range(start_step, total_steps):
        idxs = state.rng.integers(0, n_train, batch)
        ids, x0, mask = _assemble_batch(prep, idxs)
        m3 = Tensor(mask[..., None])
        try:
            with Tape() as tape:
                cvec = nm.mul(model.cond.forward(ids), m3)
                if kind == "ddpm":
                    t = state.rng.integers(1, sched.steps + 1, batch)
                    eps = state.rng.normal(x0.shape)
                    loss = diffusion.training_loss_graph(model.net, x0, cvec, t, eps, sched, mask)
                else:
                    loss = baseline_loss_graph(
                        model.net, cvec, x0, mask, rng=state.rng, training=True
                    )
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise nm.NonFiniteError("loss")
            grads = nm.backward(tape, loss)
        except nm.NonFiniteError as e:
            raise TrainingDiverged(step + 1) from e
        model.replace_params(optimizer.step(model.params, grads, frozen))
        state.step = step + 1
        if state.step % config.train.log_every == 0 or state.step == total_steps:
            log.append((state.step, loss_value))
            if on_log is not None:
                on_log(state.step, loss_value)
        every = config.train.checkpoint_every
        if on_checkpoint is not None and every and state.step % every == 0 and state.step < total_steps:
            on_checkpoint(make_checkpoint(config, state, prep.stats, config.train.seed))

    final = make_checkpoint(config, state, prep.stats, config.train.seed)
    if on_checkpoint is not None:
        on_checkpoint(final)
    return final, log


def _adopt_condition(model: TrainableModel, donor: Checkpoint, stats: NormStats) -> None:
    donor_cond = {k: v for k, v in donor.params.items() if k.startswith("cond.")}
    if set(donor_cond) != set(model.cond.params) or any(
        donor_cond[k].shape != model.cond.params[k].shape for k in donor_cond
    ):
        raise ConfigError("condition.init_from checkpoint has an incompatible condition encoder")
    if not donor.stats.equals(stats):
        raise ConfigError(
            "condition.init_from checkpoint was trained on different normalization statistics"
        )
    model.cond.params = {k: donor_cond[k] for k in model.cond.params}
