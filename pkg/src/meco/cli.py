"""Command-line interface.

One binary, six subcommands: synth, train-codec, train-lm, generate,
evaluate, pipeline. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric error. Progress is emitted to stderr as JSON lines; artifacts go
to files. The artifact directory defaults to $MECO_CACHE (falling back to
./meco_cache).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DataError, MecoError, MissingArtifactError, NumericError


def log(record: dict) -> None:
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stderr.flush()


def default_workdir() -> str:
    return os.environ.get("MECO_CACHE", os.path.join(os.getcwd(), "meco_cache"))


def _load_config(args):
    from .pipeline import load_run_config, make_config

    if getattr(args, "config", None):
        return load_run_config(args.config)
    return make_config(preset=getattr(args, "preset", "desk"), seed=getattr(args, "seed", 0))


def cmd_synth(args) -> int:
    from .pipeline import PipelineRun

    config = _load_config(args)
    if args.seed is not None:
        config.seed = args.seed
    run = PipelineRun(config, args.workdir, log=log)
    run.run_step("synth", run.step_synth)
    print(os.path.join(args.workdir, "data", "manifest.jsonl"))
    return 0


def cmd_train_codec(args) -> int:
    from .pipeline import PipelineRun

    config = _load_config(args)
    if args.seed is not None:
        config.seed = args.seed
    run = PipelineRun(config, args.workdir, log=log)
    run.run_step(f"codec:{args.part}", lambda: run.step_codec(args.part))
    print(run.codec_path(args.part))
    return 0


def cmd_train_lm(args) -> int:
    from .pipeline import PipelineRun

    config = _load_config(args)
    if args.seed is not None:
        config.seed = args.seed
        for st in (config.stage0, config.stage1, config.stage2, config.stage3):
            st.seed = args.seed
    run = PipelineRun(config, args.workdir, log=log)
    stage = args.stage
    if stage == 0:
        run.run_step("corpus", run.step_corpus)
        run.run_step("stage0", run.step_stage0)
    else:
        prev = run.lm_path(stage - 1)
        if args.init:
            if not os.path.exists(args.init):
                raise MissingArtifactError(f"init checkpoint not found: {args.init}")
            os.makedirs(os.path.dirname(prev), exist_ok=True)
            if os.path.abspath(args.init) != os.path.abspath(prev):
                import shutil

                shutil.copyfile(args.init, prev)
        step = {1: run.step_stage1, 2: run.step_stage2, 3: run.step_stage3}[stage]
        run.run_step(f"stage{stage}", step)
    print(run.lm_path(stage))
    return 0


def cmd_generate(args) -> int:
    from .motion import MotionClip
    from .motion_io import load_motion, load_wav, save_motion
    from .pipeline import PipelineRun
    from .prompts import ExamplePrompt
    from .rvq import tokenize_motion
    from .sampler import SamplerConfig, example_from_codes, generate_long
    from .seq_model import load_model
    from .audio_units import load_unit_codebook

    config = _load_config(args)
    run = PipelineRun(config, args.workdir, log=log)
    model = load_model(run.require(run.lm_path(3), "stage3"))
    codecs = run.load_codecs()
    units = load_unit_codebook(run.units_path())
    waveform, sr = load_wav(args.audio)

    if args.example and args.example != "none":
        clip = load_motion(args.example)
        codes = {p: seq.codes for p, seq in tokenize_motion(clip, codecs).items()}
        example = example_from_codes(codes, dedup=not args.no_dedup_example, seed=args.seed)
    else:
        example = ExamplePrompt.empty()

    initial_pose = None
    if args.seed_pose and args.seed_pose != "none":
        pose_clip = load_motion(args.seed_pose)
        if pose_clip.n_frames == 0:
            raise DataError(f"seed pose file {args.seed_pose} has no frames")
        initial_pose = pose_clip.frames[0]

    sampler = SamplerConfig(
        beta=args.beta, gamma=args.gamma, mode=args.mode,
        temperature=args.temperature, top_k=args.top_k, seed=args.seed,
    )
    clip, gen_log = generate_long(
        model, codecs, units, waveform, sr, example, sampler, initial_pose=initial_pose
    )
    save_motion(args.out, clip)
    for w in gen_log.windows:
        log({"event": "window_tokens", **w})
    log(
        {
            "event": "generated",
            "out": args.out,
            "frames": clip.n_frames,
            "audio_padded": gen_log.audio_padded,
        }
    )
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import (
        MetricConfig,
        beat_constancy,
        extract_gesture_beats,
        fgd,
        autoencoder_features,
        l1_diversity,
        load_fgd_autoencoder,
        raw_pose_features,
        text_retention,
    )
    from .motion import MotionClip
    from .motion_io import load_motion, read_manifest
    from .pipeline import write_jsonl
    from .seq_model import load_model

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    real_records = read_manifest(args.real)
    gen_records = read_manifest(args.generated)
    real_dir = os.path.dirname(args.real)
    gen_dir = os.path.dirname(args.generated)
    real_clips = [load_motion(os.path.join(real_dir, r["motion_path"])) for r in real_records]
    gen_clips = [load_motion(os.path.join(gen_dir, r["motion_path"])) for r in gen_records]
    cfg = MetricConfig(sigma_bc=args.sigma_bc)
    report = []
    for metric in metrics:
        if metric == "fgd2":
            value = fgd(
                raw_pose_features(real_clips, cfg.fgd_window_frames),
                raw_pose_features(gen_clips, cfg.fgd_window_frames),
            )
            report.append({"metric": "fgd2", "value": value, "config": {"window_frames": cfg.fgd_window_frames}})
        elif metric == "fgd1":
            if not args.ae:
                raise ConfigError("fgd1 needs --ae <autoencoder checkpoint>")
            ae = load_fgd_autoencoder(args.ae)
            value = fgd(autoencoder_features(real_clips, ae), autoencoder_features(gen_clips, ae))
            report.append({"metric": "fgd1", "value": value, "config": {"feature_dim": ae.feature_dim}})
        elif metric == "bc":
            by_id = {r["id"]: r for r in real_records}
            vals = []
            for rec, clip in zip(gen_records, gen_clips):
                ref = by_id.get(rec["id"], rec)
                beats = extract_gesture_beats(clip, cfg)
                audio_beats = np.asarray(ref["beat_times"], dtype=np.float64)
                if beats.size and audio_beats.size:
                    vals.append(beat_constancy(beats, audio_beats, cfg.sigma_bc))
            report.append(
                {"metric": "bc", "value": float(np.mean(vals)) if vals else 0.0,
                 "config": {"sigma_bc": cfg.sigma_bc, "clips": len(vals)}}
            )
        elif metric == "div":
            crop = min(c.n_frames for c in gen_clips)
            cropped = [
                MotionClip(frames=c.frames[:crop], frame_rate=c.frame_rate, part_masks=c.part_masks)
                for c in gen_clips
            ]
            report.append({"metric": "div", "value": l1_diversity(cropped), "config": {"crop_frames": crop}})
        elif metric == "retention":
            if not (args.base_lm and args.tuned_lm and args.text):
                raise ConfigError("retention needs --base-lm, --tuned-lm, and --text")
            with open(args.text, "rb") as f:
                text = f.read()
            ret = text_retention(load_model(args.base_lm), load_model(args.tuned_lm), text)
            report.append({"metric": "retention", "value": ret["degradation"], "config": ret})
        else:
            raise ConfigError(f"unknown metric {metric!r}")
    write_jsonl(args.out, report)
    for rec in report:
        log({"event": "metric", **rec})
    print(args.out)
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import PipelineRun

    config = _load_config(args)
    if args.seed is not None:
        config.seed = args.seed
        for st in (config.stage0, config.stage1, config.stage2, config.stage3):
            st.seed = args.seed
        config.sampler.seed = args.seed
    run = PipelineRun(config, args.workdir, log=log)
    run.run_all()
    print(run.manifest_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meco",
        description="Motion-example-controlled co-speech gesture generation (desk scale)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="run config JSON ({preset, seed, overrides})")
        p.add_argument("--preset", default="desk", choices=("desk", "paper"))
        p.add_argument("--workdir", default=default_workdir(), help="artifact directory (default: $MECO_CACHE)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="generate the synthetic paired dataset")
    add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train-codec", help="train one body part's RVQ codec")
    add_common(p)
    p.add_argument("--part", required=True, choices=("upper", "lower", "hands"))
    p.set_defaults(fn=cmd_train_codec)

    p = sub.add_parser("train-lm", help="run one LM training stage")
    add_common(p)
    p.add_argument("--stage", type=int, required=True, choices=(0, 1, 2, 3))
    p.add_argument("--init", help="checkpoint to initialize from (defaults to the previous stage)")
    p.add_argument("--data", help="dataset manifest (defaults to the workdir dataset)")
    p.set_defaults(fn=cmd_train_lm)

    p = sub.add_parser("generate", help="generate motion for a wave file")
    add_common(p)
    p.add_argument("--audio", required=True)
    p.add_argument("--example", default="none", help="motion file to use as the example, or 'none'")
    p.add_argument("--seed-pose", default="none", help="motion file whose first frame seeds the pose")
    p.add_argument("--beta", type=float, default=5.0)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--mode", default="greedy", choices=("greedy", "temperature", "top_k"))
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--no-dedup-example", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="compute metrics over real vs generated manifests")
    add_common(p)
    p.add_argument("--real", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--metrics", default="fgd2,bc,div")
    p.add_argument("--ae", help="fgd1 autoencoder checkpoint")
    p.add_argument("--base-lm")
    p.add_argument("--tuned-lm")
    p.add_argument("--text", help="held-out text file for retention")
    p.add_argument("--sigma-bc", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run every step end to end (resumable)")
    add_common(p)
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    seed = getattr(args, "seed", None)
    if seed is None:
        args.seed = 0 if args.command in ("generate", "evaluate") else None
    try:
        return args.fn(args)
    except ConfigError as e:
        log({"event": "error", "kind": "config", "message": str(e)})
        return 2
    except DataError as e:
        log({"event": "error", "kind": "data", "message": str(e)})
        return 3
    except NumericError as e:
        log({"event": "error", "kind": "numeric", "message": str(e)})
        return 4
    except MecoError as e:
        log({"event": "error", "kind": "other", "message": str(e)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
