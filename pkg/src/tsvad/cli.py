"""Command-line entry point.

Subcommands mirror the system stages: simulate a corpus, run the clustering
first pass, train the detector, run inference, score against references,
or run the whole ablation experiment end to end. Every command is
deterministic given --seed and its inputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys

import numpy as np

from . import autodiff as ad
from .clustering import (ClusteringError, read_profiles, write_profiles)
from .experiment import ExperimentConfig, run_experiment
from .model import PRESETS, ModelConfig, TsVadModel
from .pipeline import (ChunkPlan, FirstPassConfig, PipelineError, StitchPolicy,
                       first_pass_result, infer, run_system)
from .scoring import (CollarSpec, RttmDocument, RttmParseError, ScoringError,
                      der, parse_rttm, pooled_der, write_rttm)
from .simulate import (Conversation, CorpusConfig, GenerationError,
                       generate_corpus, read_corpus, write_corpus)
from .training import (NumericError, parse_recipe_file, resolve_mix,
                       run_recipe, single_stage_recipe, three_stage_recipe)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliConfigError(Exception):
    pass


class CliDataError(Exception):
    pass


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliConfigError(f"expected a boolean, got {value!r}")
    if target_type is tuple:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return target_type(value)


def apply_section(instance, parser: configparser.ConfigParser, section: str):
    """Overlay ``key = value`` pairs from a config section onto a dataclass."""
    if not parser.has_section(section):
        return instance
    types = {f.name: type(getattr(instance, f.name))
             for f in dataclasses.fields(instance)}
    updates = {}
    for key, value in parser.items(section):
        if key not in types:
            raise CliConfigError(f"unknown key {key!r} in [{section}]")
        updates[key] = _coerce(value, types[key])
    return dataclasses.replace(instance, **updates)


def load_config_file(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        if not parser.read(path):
            raise CliDataError(f"config file not found: {path}")
    return parser


def print_config(instance, out=None):
    out = out if out is not None else sys.stdout
    section = type(instance).__name__
    out.write(f"[{section}]\n")
    for f in dataclasses.fields(instance):
        out.write(f"{f.name} = {getattr(instance, f.name)}\n")


def write_run_config(out_dir: str, instance) -> None:
    os.makedirs(out_dir, exist_ok=True)
    import hashlib
    import json
    blob = json.dumps(dataclasses.asdict(instance), sort_keys=True, default=str)
    digest = hashlib.sha256(blob.encode()).hexdigest()[:12]
    with open(os.path.join(out_dir, "run-config.txt"), "w") as fh:
        fh.write(f"# config-hash: {digest}\n")
        print_config(instance, out=fh)


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    parser = load_config_file(args.config)
    cfg = apply_section(CorpusConfig(), parser, "corpus")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.conversations is not None:
        cfg = dataclasses.replace(cfg, num_conversations=args.conversations)
    if args.print_config:
        print_config(cfg)
        return EXIT_OK
    corpus = generate_corpus(cfg)
    manifest = write_corpus(corpus, args.out)
    write_run_config(args.out, cfg)
    print(f"wrote {len(corpus)} conversations; manifest at {manifest}")
    return EXIT_OK


def _load_corpus(path: str) -> list:
    manifest = path
    if os.path.isdir(path):
        manifest = os.path.join(path, "manifest.tsv")
    if not os.path.exists(manifest):
        raise CliDataError(f"corpus manifest not found: {manifest}")
    return read_corpus(manifest)


def cmd_firstpass(args) -> int:
    fp = FirstPassConfig(method=args.method, threshold=args.threshold,
                         use_vad=args.vad, seed=args.seed or 0)
    if args.print_config:
        print_config(fp)
        return EXIT_OK
    corpus = _load_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    from .clustering import clustered_profiles
    for conv in corpus:
        pset = clustered_profiles(conv.features, fp.source(),
                                  vad_threshold=fp.vad_threshold,
                                  max_speakers=fp.max_speakers,
                                  min_seconds=fp.min_profile_seconds,
                                  seed=fp.seed)
        write_profiles(os.path.join(args.out, f"{conv.conv_id}.profiles"), pset)
        doc = RttmDocument.from_result(first_pass_result(pset), conv.conv_id)
        with open(os.path.join(args.out, f"{conv.conv_id}.rttm"), "w") as fh:
            fh.write(write_rttm(doc))
        print(f"{conv.conv_id}: {pset.num_speakers} profiles "
              f"({len(pset.passthrough_labels())} below floor)")
    write_run_config(args.out, fp)
    return EXIT_OK


def _model_config_from(args, parser) -> ModelConfig:
    if args.preset not in PRESETS:
        raise CliConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[args.preset]
    cfg = apply_section(cfg, parser, "model")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    parser = load_config_file(args.config)
    model_cfg = _model_config_from(args, parser)
    if args.recipe is not None:
        recipe = parse_recipe_file(args.recipe, base_config=model_cfg)
    elif args.recipe_preset == "three-stage":
        recipe = three_stage_recipe(model_cfg, mix_name=args.profile_mix or "config2",
                                    steps=tuple(args.steps or (300, 300, 120)))
    else:
        recipe = single_stage_recipe(model_cfg, mix_name=args.profile_mix or "oracle",
                                     steps=(args.steps or [300])[0])
    resolve_mix(recipe.stages[0].profile_source)  # fail fast on bad mix names
    if args.print_config:
        print_config(model_cfg)
        for stage in recipe.stages:
            print_config(stage)
        return EXIT_OK
    corpus = _load_corpus(args.corpus)
    result = run_recipe(recipe, corpus, seed=args.seed or 0, out_dir=args.out)
    write_run_config(args.out, model_cfg)
    final = result.metrics[-1][3] if result.metrics else float("nan")
    print(f"trained {len(result.models)} stage(s); final loss {final:.4f}; "
          f"checkpoints in {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    stitch = StitchPolicy(clust_psd_spk=args.clust_psd_spk)
    if args.print_config:
        print_config(stitch)
        return EXIT_OK
    corpus = _load_corpus(args.corpus)
    model = TsVadModel.load(args.model)
    os.makedirs(args.out, exist_ok=True)
    for conv in corpus:
        plan = ChunkPlan.from_seconds(args.chunk_seconds, conv.features.frame_seconds)
        if args.profiles is not None:
            ppath = os.path.join(args.profiles, f"{conv.conv_id}.profiles")
            if not os.path.exists(ppath):
                raise CliDataError(f"missing profile file: {ppath}")
            pset = read_profiles(ppath)
            rttm_path = os.path.join(args.profiles, f"{conv.conv_id}.rttm")
            if os.path.exists(rttm_path):
                with open(rttm_path) as fh:
                    fp_result = parse_rttm(fh.read()).to_result(conv.conv_id)
                pset.first_pass_segments = dict(fp_result.segments)
            out = infer(conv.features, model, pset, chunk_plan=plan, stitch=stitch)
            result = out.result
            records = out.pseudo_records
        else:
            fp = FirstPassConfig(method=args.method, threshold=args.threshold,
                                 use_vad=args.vad, seed=args.seed or 0)
            sysout = run_system(conv.features, fp, model, stitch=stitch, chunk_plan=plan)
            result = sysout.final
            records = sysout.inference.pseudo_records
        doc = RttmDocument.from_result(result, conv.conv_id)
        with open(os.path.join(args.out, f"{conv.conv_id}.rttm"), "w") as fh:
            fh.write(write_rttm(doc))
        with open(os.path.join(args.out, f"{conv.conv_id}.pseudo.tsv"), "w") as fh:
            fh.write("chunk\tpseudo\tactive_seconds\tlabel\n")
            for rec in records:
                fh.write(f"{rec.chunk_index}\t{rec.pseudo_index}\t"
                         f"{rec.active_seconds:.3f}\t{rec.label}\n")
        print(f"{conv.conv_id}: {len(result.labels())} speakers")
    write_run_config(args.out, stitch)
    return EXIT_OK


def cmd_score(args) -> int:
    collar = CollarSpec(collar=args.collar, score_overlap=args.score_overlap)
    if args.print_config:
        print_config(collar)
        return EXIT_OK
    ref_files = _rttm_map(args.ref)
    hyp_files = _rttm_map(args.hyp)
    missing = sorted(set(ref_files) - set(hyp_files))
    if missing:
        raise CliDataError(f"hypothesis missing for: {', '.join(missing[:5])}")
    parts = []
    for stem in sorted(ref_files):
        with open(ref_files[stem]) as fh:
            ref = parse_rttm(fh.read()).to_result()
        with open(hyp_files[stem]) as fh:
            hyp = parse_rttm(fh.read()).to_result()
        breakdown = der(ref, hyp, collar)
        parts.append(breakdown)
        if args.per_file:
            print(f"{stem}\tDER {breakdown.der:.2f}\tmiss {breakdown.miss:.2f}\t"
                  f"fa {breakdown.fa:.2f}\tsc {breakdown.sc:.2f}")
    pooled = pooled_der(parts)
    print("| ID | System | Profiles | Clust-psd-spk | DER | miss | fa | sc |")
    print("|---|---|---|---|---|---|---|---|")
    print("| {} | {} | {} | {} | {:.2f} | {:.2f} | {:.2f} | {:.2f} |".format(
        args.row_id, args.system, args.profiles_name, args.clust_psd_spk_name,
        pooled.der, pooled.miss, pooled.fa, pooled.sc))
    return EXIT_OK


def _rttm_map(path: str) -> dict:
    if os.path.isdir(path):
        out = {}
        for name in os.listdir(path):
            if name.endswith(".rttm"):
                out[name[:-5]] = os.path.join(path, name)
        if not out:
            raise CliDataError(f"no .rttm files under {path}")
        return out
    if not os.path.exists(path):
        raise CliDataError(f"missing RTTM path: {path}")
    return {os.path.basename(path)[:-5]: path}


def cmd_experiment(args) -> int:
    parser = load_config_file(args.config)
    cfg = apply_section(ExperimentConfig(), parser, "experiment")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.quick:
        cfg = dataclasses.replace(
            cfg, train_conversations=8, eval_conversations=4, base_steps=30,
            adapt_steps=20, duration_frames=400, mixes=("config1",))
    if args.print_config:
        print_config(cfg)
        return EXIT_OK
    result = run_experiment(cfg, out_dir=args.out)
    print(result.markdown)
    if args.out:
        print(f"report written to {os.path.join(args.out, 'ablation.md')}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsvad",
        description="Two-pass speaker diarization with pseudo-speaker slots")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        if out_required:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--print-config", action="store_true",
                       help="print the resolved configuration and exit")

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--conversations", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("firstpass", help="clustering first pass over a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", choices=("ahc", "nmesc"), default="ahc")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--vad", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_firstpass)

    p = sub.add_parser("train", help="run a training recipe")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--recipe", default=None, help="recipe config file")
    p.add_argument("--recipe-preset", choices=("single-stage", "three-stage"),
                   default="single-stage")
    p.add_argument("--preset", default="toy", help="model preset (toy, paper-scale)")
    p.add_argument("--profile-mix", default=None,
                   help="profile mix name (config1, config2, oracle)")
    p.add_argument("--steps", type=int, nargs="+", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run detection over a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="checkpoint path prefix")
    p.add_argument("--profiles", default=None,
                   help="directory of firstpass outputs; omit to run the first pass inline")
    p.add_argument("--method", choices=("ahc", "nmesc"), default="ahc")
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--vad", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--clust-psd-spk", action=argparse.BooleanOptionalAction,
                   default=False, help="cluster pseudo activity across chunks")
    p.add_argument("--chunk-seconds", type=float, default=120.0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="collar-aware DER against references")
    p.add_argument("--config", default=None)
    p.add_argument("--print-config", action="store_true")
    p.add_argument("--ref", required=True, help="reference RTTM file or directory")
    p.add_argument("--hyp", required=True, help="hypothesis RTTM file or directory")
    p.add_argument("--collar", type=float, default=0.25)
    p.add_argument("--score-overlap", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--per-file", action="store_true")
    p.add_argument("--row-id", default="S1")
    p.add_argument("--system", default="hyp")
    p.add_argument("--profiles-name", default="-")
    p.add_argument("--clust-psd-spk-name", default="-")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("experiment", help="full self-contained ablation")
    common(p)
    p.add_argument("--quick", action="store_true",
                   help="tiny budgets for smoke testing")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliConfigError, GenerationError, ClusteringError, PipelineError,
            ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliDataError, FileNotFoundError, RttmParseError, ScoringError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
