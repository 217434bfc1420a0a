"""Self-contained ablation: does adding pseudo-speaker slots buy back the
errors of a broken first pass?

Simulates train/eval corpora, trains the plain detector and pseudo-slot
variants on each profile mix under a shared step budget, then evaluates all
of them against first passes deliberately corrupted to miss one speaker per
conversation. Emits one table row per (system, pseudo-stitching mode).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .clustering import ProfileSet, oracle_profiles
from .model import ModelConfig, TsVadModel
from .pipeline import ChunkPlan, StitchPolicy, infer
from .scoring import (CollarSpec, DerBreakdown, DiarizationResult, der,
                      pooled_der)
from .simulate import Conversation, CorpusConfig, generate_corpus
from .training import TrainingStage, train_stage


@dataclass
class ExperimentConfig:
    seed: int = 0
    collar: float = 0.25
    # corpus (frame rate and sizes are desk-scale: 0.05 s frames keep the
    # time arithmetic intact while fitting a CPU budget)
    train_conversations: int = 60
    eval_conversations: int = 40
    speakers_min: int = 3
    speakers_max: int = 5
    duration_frames: int = 600
    frame_seconds: float = 0.05
    embed_dim: int = 32
    noise_sigma: float = 0.1
    similarity_ceiling: float = 0.4
    utt_min: int = 10
    utt_max: int = 60
    # model / budgets
    model_preset: str = "toy"
    num_pseudo: int = 3
    base_steps: int = 600
    adapt_steps: int = 500
    batch_size: int = 4
    peak_lr: float = 5e-3
    adapt_lr: float = 2e-3
    chunk_frames: int = 150
    infer_chunk_seconds: float = 120.0
    mixes: tuple = ("config1", "config2")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def corpus_config(cfg: ExperimentConfig, n: int, seed: int) -> CorpusConfig:
    return CorpusConfig(
        num_conversations=n, speakers_min=cfg.speakers_min,
        speakers_max=cfg.speakers_max, duration_frames=cfg.duration_frames,
        embed_dim=cfg.embed_dim, frame_seconds=cfg.frame_seconds,
        noise_sigma=cfg.noise_sigma, similarity_ceiling=cfg.similarity_ceiling,
        utt_min=cfg.utt_min, utt_max=cfg.utt_max, seed=seed)


def corrupt_first_pass(conv: Conversation, seed: int) -> tuple[ProfileSet, str]:
    """Oracle profiles minus one deliberately dropped speaker.

    The dropped speaker keeps no profile and no passthrough segments: from
    the system's point of view the first pass never saw them.
    """
    pset = oracle_profiles(conv)
    rng = np.random.default_rng((seed, 0xD607))
    victim = int(rng.integers(len(pset.speaker_labels)))
    label = pset.speaker_labels[victim]
    keep = [i for i in range(len(pset.speaker_labels)) if i != victim]
    corrupted = ProfileSet(
        profiles=pset.profiles[keep],
        speaker_labels=[pset.speaker_labels[i] for i in keep],
        source=pset.source,
        first_pass_segments={k: v for k, v in pset.first_pass_segments.items()
                             if k != label})
    return corrupted, label


@dataclass
class EvalOutcome:
    pooled: DerBreakdown
    per_file: list
    capture_recalls: list  # best-pseudo recall of the dropped speaker, per conv
    captured_fraction: float


def evaluate_model(model: TsVadModel, eval_corpus: list, corruptions: list,
                   cfg: ExperimentConfig, clust_psd_spk: bool) -> EvalOutcome:
    stitch = StitchPolicy(clust_psd_spk=clust_psd_spk)
    plan = ChunkPlan.from_seconds(cfg.infer_chunk_seconds, cfg.frame_seconds)
    parts = []
    recalls = []
    for conv, (profiles, dropped_label) in zip(eval_corpus, corruptions):
        out = infer(conv.features, model, profiles, chunk_plan=plan, stitch=stitch)
        ref = DiarizationResult.from_activity(conv.activity.activity,
                                              conv.activity.speaker_ids,
                                              conv.features.frame_seconds)
        parts.append(der(ref, out.result, CollarSpec(cfg.collar)))
        recalls.append(_pseudo_capture_recall(out, conv, dropped_label))
    pooled = pooled_der(parts)
    captured = float(np.mean([r > 0.8 for r in recalls])) if recalls else 0.0
    return EvalOutcome(pooled=pooled, per_file=parts, capture_recalls=recalls,
                       captured_fraction=captured)


def _pseudo_capture_recall(out, conv: Conversation, dropped_label: str) -> float:
    """Fraction of the dropped speaker's active frames covered by the best
    single pseudo column (binarized at 0.5)."""
    k = conv.activity.speaker_ids.index(dropped_label)
    ref = conv.activity.activity[:, k].astype(bool)
    if not ref.any():
        return 1.0
    pseudo_cols = [i for i, role in enumerate(out.column_roles)
                   if role.startswith("pseudo:")]
    best = 0.0
    for col in pseudo_cols:
        active = out.posterior[:, col] > 0.5
        best = max(best, float((active & ref).sum() / ref.sum()))
    return best


@dataclass
class ReportRow:
    row_id: str
    system: str
    profiles: str
    clust_psd_spk: bool
    der: float
    miss: float
    fa: float
    sc: float
    captured_fraction: float | None = None


REPORT_COLUMNS = ["ID", "System", "Profiles", "Clust-psd-spk", "DER", "miss", "fa", "sc"]


def report_markdown(rows: list, header_lines: list) -> str:
    out = [f"<!-- {line} -->" for line in header_lines]
    out.append("| " + " | ".join(REPORT_COLUMNS) + " |")
    out.append("|" + "---|" * len(REPORT_COLUMNS))
    for r in rows:
        out.append("| {} | {} | {} | {} | {:.2f} | {:.2f} | {:.2f} | {:.2f} |".format(
            r.row_id, r.system, r.profiles, "yes" if r.clust_psd_spk else "-",
            r.der, r.miss, r.fa, r.sc))
    return "\n".join(out) + "\n"


def report_csv(rows: list, header_lines: list) -> str:
    out = [f"# {line}" for line in header_lines]
    out.append(",".join(REPORT_COLUMNS))
    for r in rows:
        out.append("{},{},{},{},{:.4f},{:.4f},{:.4f},{:.4f}".format(
            r.row_id, r.system, r.profiles, "yes" if r.clust_psd_spk else "-",
            r.der, r.miss, r.fa, r.sc))
    return "\n".join(out) + "\n"


@dataclass
class ExperimentResult:
    rows: list
    outcomes: dict  # (system, clust) -> EvalOutcome
    config: ExperimentConfig
    markdown: str
    csv: str


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None,
                   log=print) -> ExperimentResult:
    base_model_cfg = _model_config(cfg)
    train_corpus = generate_corpus(corpus_config(cfg, cfg.train_conversations,
                                                 seed=cfg.seed * 1000 + 1))
    eval_corpus = generate_corpus(corpus_config(cfg, cfg.eval_conversations,
                                                seed=cfg.seed * 1000 + 2))
    corruptions = [corrupt_first_pass(conv, seed=cfg.seed * 1000 + 3 + i)
                   for i, conv in enumerate(eval_corpus)]

    log(f"[experiment] shared pretraining: {cfg.base_steps} steps")
    shared = TsVadModel(replace(base_model_cfg, num_pseudo=0))
    train_stage(shared, train_corpus,
                TrainingStage(name="pretrain-base", num_pseudo=0,
                              profile_source="oracle", steps=cfg.base_steps,
                              batch_size=cfg.batch_size, peak_lr=cfg.peak_lr,
                              chunk_frames=cfg.chunk_frames, init="random"),
                seed=cfg.seed, stage_idx=0)
    shared_state = shared.state()

    systems = []  # (row tag, system name, model)
    log(f"[experiment] baseline adaptation: {cfg.adapt_steps} steps")
    baseline = TsVadModel(replace(base_model_cfg, num_pseudo=0, seed=base_model_cfg.seed + 1))
    baseline.load_state(shared_state)
    train_stage(baseline, train_corpus,
                TrainingStage(name="baseline-cont", num_pseudo=0,
                              profile_source="oracle", steps=cfg.adapt_steps,
                              batch_size=cfg.batch_size, peak_lr=cfg.adapt_lr,
                              chunk_frames=cfg.chunk_frames, init="previous"),
                seed=cfg.seed, stage_idx=1)
    systems.append(("tsvad-base", baseline))

    for mi, mix_name in enumerate(cfg.mixes):
        log(f"[experiment] pseudo-slot variant on {mix_name}: {cfg.adapt_steps} steps")
        variant = TsVadModel(replace(base_model_cfg, num_pseudo=cfg.num_pseudo,
                                     seed=base_model_cfg.seed + 2 + mi))
        variant.load_state(shared_state, strict=False)
        train_stage(variant, train_corpus,
                    TrainingStage(name=f"pseudo-{mix_name}", num_pseudo=cfg.num_pseudo,
                                  profile_source=mix_name, steps=cfg.adapt_steps,
                                  batch_size=cfg.batch_size, peak_lr=cfg.adapt_lr,
                                  chunk_frames=cfg.chunk_frames, init="previous"),
                    seed=cfg.seed, stage_idx=2 + mi)
        systems.append((f"tsvad-pseudo-{mix_name}", variant))

    rows: list[ReportRow] = []
    outcomes: dict = {}
    rid = 0
    for name, model in systems:
        for clust in (False, True):
            rid += 1
            outcome = evaluate_model(model, eval_corpus, corruptions, cfg, clust)
            outcomes[(name, clust)] = outcome
            profile_tag = "corrupted-oracle"
            captured = outcome.captured_fraction if model.config.num_pseudo else None
            rows.append(ReportRow(
                row_id=f"S{rid}", system=name, profiles=profile_tag,
                clust_psd_spk=clust, der=outcome.pooled.der,
                miss=outcome.pooled.miss, fa=outcome.pooled.fa,
                sc=outcome.pooled.sc, captured_fraction=captured))
            log(f"[experiment] {name} clust={clust}: DER {outcome.pooled.der:.2f} "
                f"(miss {outcome.pooled.miss:.2f} fa {outcome.pooled.fa:.2f} "
                f"sc {outcome.pooled.sc:.2f})"
                + (f" capture {outcome.captured_fraction:.2f}" if captured is not None else ""))

    header = [f"config-hash: {cfg.config_hash()}", f"seed: {cfg.seed}"]
    md = report_markdown(rows, header)
    csv = report_csv(rows, header)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.md"), "w") as fh:
            fh.write(md)
        with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
            fh.write(csv)
        for name, model in systems:
            model.save(os.path.join(out_dir, name))
    return ExperimentResult(rows=rows, outcomes=outcomes, config=cfg,
                            markdown=md, csv=csv)


def _model_config(cfg: ExperimentConfig) -> ModelConfig:
    from .model import PRESETS
    base = PRESETS[cfg.model_preset]
    return replace(base, feat_dim=cfg.embed_dim, embed_dim=cfg.embed_dim,
                   profile_dim=cfg.embed_dim, num_pseudo=cfg.num_pseudo,
                   seed=cfg.seed)
