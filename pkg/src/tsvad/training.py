"""Permutation-invariant training of the detection network.

The loss scores every output column against every reference column with
binary cross entropy, finds the cheapest output-to-reference bijection with
the Hungarian solver, and backpropagates only through the matched pairs.
References are padded with all-zero (silence) columns when the network has
more outputs than there are speakers, which is what teaches the pseudo
columns to stay quiet unless a speaker is missing; in the rare opposite
case (more speakers than outputs) zero-cost virtual outputs absorb the
surplus references, leaving them unsupervised for that chunk.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .assignment import assignment_cost, hungarian  # noqa: F401  (hungarian is part of this module's API)
from .autodiff import Tape, Tensor
from .clustering import MIXES, ProfileSourceMix, training_profiles
from .model import ModelConfig, SpeechActivityPosterior, TsVadModel
from .simulate import chunk as chunk_conversation


class NumericError(Exception):
    pass


# ---------------------------------------------------------------------------
# permutation-invariant loss

def bce_cost_matrix(posterior: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Mean-over-frames BCE between every output and reference column.

    Returns a square (n, n) matrix, n = max(outputs, references): reference
    columns are padded with silence, output rows with zero cost.
    """
    post = np.asarray(posterior, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if post.shape[0] != ref.shape[0]:
        raise ValueError(f"frame counts disagree: {post.shape[0]} vs {ref.shape[0]}")
    T, O = post.shape
    R = ref.shape[1]
    n = max(O, R)
    p = np.clip(post, ad.BCE_EPS, 1.0 - ad.BCE_EPS)
    ln_p = np.log(p)
    ln_1p = np.log1p(-p)
    base = -ln_1p.sum(axis=0)  # silence cost * T, per output
    cross = (ln_p - ln_1p).T @ ref  # (O, R)
    cost = np.zeros((n, n))
    cost[:O, :] = base[:, None] / T
    cost[:O, :R] -= cross / T
    return cost


@dataclass
class PitLossReport:
    cost_matrix: np.ndarray
    best_assignment: list
    loss: Tensor
    permutation_count_evaluated: int  # size of the assignment space searched


def pit_loss(posterior, reference: np.ndarray) -> PitLossReport:
    """Best-permutation BCE between posteriors and reference activity.

    The loss is the mean of the matched per-pair BCEs (equivalently: one BCE
    over the posterior matrix against its matched targets), so its scale is
    independent of the number of outputs, references and frames.
    """
    values = posterior.values if isinstance(posterior, SpeechActivityPosterior) else posterior
    post = values.data
    ref = np.asarray(reference, dtype=np.float64)
    T, O = post.shape
    R = ref.shape[1]
    if O == 0:
        raise ValueError("posterior has no output columns to match")
    cost = bce_cost_matrix(post, ref)
    assign = hungarian(cost)
    targets = np.zeros((T, O))
    for i in range(O):
        j = assign[i]
        if j < R:
            targets[:, i] = ref[:, j]
    loss = ad.bce(values, Tensor(targets))
    return PitLossReport(cost_matrix=cost, best_assignment=assign, loss=loss,
                         permutation_count_evaluated=math.factorial(cost.shape[0]))


# ---------------------------------------------------------------------------
# optimizer and schedule

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8


def adam_init(params: dict, beta1: float = 0.9, beta2: float = 0.98,
              eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        m={name: np.zeros_like(t.data) for name, t in params.items()},
        v={name: np.zeros_like(t.data) for name, t in params.items()},
        beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> None:
    """Standard Adam with bias correction; iterates in fixed name order."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def lr_schedule(step: int, peak_lr: float, warmup_steps: int,
                total_steps: int | None) -> float:
    """Linear ramp to the peak over the warmup, then linear decay to zero.

    total_steps=None holds the peak after warmup (fixed-rate fine-tuning
    uses warmup_steps=0 with total_steps=None).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps is None:
        return peak_lr
    if step >= total_steps:
        return 0.0
    return peak_lr * (total_steps - step) / max(1, total_steps - warmup_steps)


# ---------------------------------------------------------------------------
# training recipe

@dataclass
class TrainingStage:
    name: str
    num_pseudo: int
    profile_source: str = "oracle"  # mix name from clustering.MIXES
    steps: int = 300
    batch_size: int = 4
    peak_lr: float = 1e-2
    warmup_steps: int | None = None  # default: 20% of steps
    lr_mode: str = "linear"  # "linear" | "fixed"
    init: str = "previous"  # "random" | "previous"; stage 1 is random anyway
    chunk_frames: int | None = None  # None: whole conversation


@dataclass
class TrainingRecipe:
    stages: list
    base_config: ModelConfig = field(default_factory=ModelConfig)


def three_stage_recipe(base_config: ModelConfig, mix_name: str = "config2",
                       steps: tuple = (300, 300, 120),
                       chunk_frames: int | None = 300,
                       num_pseudo: int | None = None) -> TrainingRecipe:
    """The staged schedule: plain variant on oracle profiles, pseudo-slot
    variant initialized from it on clustered profiles, then a short
    fixed-rate fine-tune."""
    z = base_config.num_pseudo if num_pseudo is None else num_pseudo
    return TrainingRecipe(stages=[
        TrainingStage(name="pretrain-base", num_pseudo=0, profile_source="oracle",
                      steps=steps[0], init="random", chunk_frames=chunk_frames),
        TrainingStage(name="pretrain-pseudo", num_pseudo=z, profile_source=mix_name,
                      steps=steps[1], init="previous", chunk_frames=chunk_frames),
        TrainingStage(name="finetune", num_pseudo=z, profile_source=mix_name,
                      steps=steps[2], init="previous", chunk_frames=chunk_frames,
                      peak_lr=1e-4, lr_mode="fixed"),
    ], base_config=base_config)


def single_stage_recipe(base_config: ModelConfig, mix_name: str = "oracle",
                        steps: int = 300, chunk_frames: int | None = 300,
                        num_pseudo: int | None = None) -> TrainingRecipe:
    z = base_config.num_pseudo if num_pseudo is None else num_pseudo
    return TrainingRecipe(stages=[
        TrainingStage(name="train", num_pseudo=z, profile_source=mix_name,
                      steps=steps, init="random", chunk_frames=chunk_frames),
    ], base_config=base_config)


def resolve_mix(source) -> ProfileSourceMix:
    if isinstance(source, ProfileSourceMix):
        return source
    if source in MIXES:
        return MIXES[source]
    raise KeyError(f"unknown profile mix {source!r}; expected one of {sorted(MIXES)}")


_STAGE_FIELD_TYPES = {
    "num_pseudo": int, "profile_source": str, "steps": int, "batch_size": int,
    "peak_lr": float, "warmup_steps": int, "lr_mode": str, "init": str,
    "chunk_frames": int,
}


def parse_recipe_file(path, base_config: ModelConfig | None = None) -> TrainingRecipe:
    """Read a recipe from a plain-text config file.

    One ``[stage <name>]`` section per stage (executed in file order) with
    TrainingStage fields as ``key = value`` lines; an optional ``[model]``
    section overrides ModelConfig fields.
    """
    import configparser

    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"recipe file not found: {path}")
    config = base_config or ModelConfig()
    if parser.has_section("model"):
        fields = {}
        for key, value in parser.items("model"):
            fields[key] = int(value)
        config = replace(config, **fields)
    stages = []
    for section in parser.sections():
        if not section.startswith("stage"):
            continue
        name = section[len("stage"):].strip() or f"stage{len(stages) + 1}"
        kwargs = {"name": name, "num_pseudo": config.num_pseudo}
        for key, value in parser.items(section):
            if key not in _STAGE_FIELD_TYPES:
                raise KeyError(f"unknown recipe field {key!r} in [{section}]")
            kwargs[key] = _STAGE_FIELD_TYPES[key](value)
        stages.append(TrainingStage(**kwargs))
    if not stages:
        raise ValueError(f"{path}: recipe defines no [stage ...] sections")
    return TrainingRecipe(stages=stages, base_config=config)


@dataclass
class RecipeResult:
    models: list
    metrics: list  # rows: (step, stage, lr, loss, dev)

    @property
    def final_model(self) -> TsVadModel:
        return self.models[-1]


METRICS_COLUMNS = ["step", "stage", "lr", "loss", "dev_der"]


def write_metrics(rows: list, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(METRICS_COLUMNS) + "\n")
        for step, stage, lr, loss, dev in rows:
            dev_txt = "" if dev is None else f"{dev:.6f}"
            fh.write(f"{step}\t{stage}\t{lr:.8g}\t{loss:.12g}\t{dev_txt}\n")


def _stage_pool(corpus: list, stage: TrainingStage, mix: ProfileSourceMix,
                seed: int, stage_idx: int) -> list:
    """Per-conversation profiles (one mix draw each) and training chunks.

    All chunks of a conversation share that conversation's profile set.
    """
    pool = []
    for ci, conv in enumerate(corpus):
        profiles = training_profiles(conv, mix,
                                     seed=int(np.random.default_rng(
                                         (seed, stage_idx, ci)).integers(2 ** 62)))
        frames = stage.chunk_frames or conv.features.frames.shape[0]
        for feats, acts in chunk_conversation(conv.features, conv.activity, frames):
            pool.append((feats.frames, acts.activity, profiles))
    return pool


def train_stage(model: TsVadModel, corpus: list, stage: TrainingStage,
                seed: int, stage_idx: int = 0, metrics: list | None = None,
                dev_eval=None, dev_every: int = 0) -> TsVadModel:
    """Run one stage of gradient steps in place; returns the model."""
    mix = resolve_mix(stage.profile_source)
    pool = _stage_pool(corpus, stage, mix, seed, stage_idx)
    if not pool:
        raise NumericError("empty training pool")
    rng = np.random.default_rng((seed, stage_idx, 0xBA7C4))
    params = model.parameters()
    state = adam_init(params)
    warmup = stage.warmup_steps if stage.warmup_steps is not None else max(1, stage.steps // 5)

    for step in range(1, stage.steps + 1):
        if stage.lr_mode == "fixed":
            lr = stage.peak_lr
        else:
            lr = lr_schedule(step, stage.peak_lr, warmup, stage.steps + 1)
        picks = rng.integers(len(pool), size=stage.batch_size)
        acc: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        used = 0
        for pick in picks.tolist():
            frames, activity, profiles = pool[pick]
            if profiles.num_speakers + model.config.num_pseudo == 0:
                continue  # nothing to supervise for this chunk
            with Tape():
                posterior = model.forward(frames, profiles)
                report = pit_loss(posterior, activity)
                grads = ad.backward(report.loss)
            batch_loss += report.loss.item()
            used += 1
            for name in params:
                g = grads.get(params[name])
                if g is None:
                    continue
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g.copy()
        if not used:
            continue
        batch_loss /= used
        if not np.isfinite(batch_loss):
            raise NumericError(f"non-finite loss at stage {stage.name!r} step {step}")
        for name in acc:
            acc[name] /= used
        adam_step(params, acc, state, lr)
        if metrics is not None:
            dev = None
            if dev_eval is not None and dev_every and step % dev_every == 0:
                dev = float(dev_eval(model))
            metrics.append((step, stage.name, lr, batch_loss, dev))
    return model


def run_recipe(recipe: TrainingRecipe, corpus: list, seed: int,
               out_dir: str | None = None, dev_eval=None,
               dev_every: int = 0) -> RecipeResult:
    """Execute the stages sequentially, each initialized from the previous
    checkpoint unless it asks for a random start; optionally writes one
    checkpoint per stage plus an append-style metrics log."""
    metrics: list = []
    models: list[TsVadModel] = []
    prev_state = None
    for stage_idx, stage in enumerate(recipe.stages):
        config = replace(recipe.base_config, num_pseudo=stage.num_pseudo,
                         seed=recipe.base_config.seed + stage_idx)
        model = TsVadModel(config)
        if stage.init == "previous" and prev_state is not None:
            model.load_state(prev_state, strict=False)
        train_stage(model, corpus, stage, seed=seed, stage_idx=stage_idx,
                    metrics=metrics, dev_eval=dev_eval, dev_every=dev_every)
        prev_state = model.state()
        models.append(model)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            model.save(os.path.join(out_dir, f"stage{stage_idx + 1}-{stage.name}"))
    if out_dir is not None:
        write_metrics(metrics, os.path.join(out_dir, "metrics.tsv"))
    return RecipeResult(models=models, metrics=metrics)
