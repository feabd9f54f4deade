"""CLI contract tests on micro-sized configs: exit codes, artifacts,
idempotence, and error channels."""

import json
import os

import numpy as np
import pytest

from meco.cli import main


MICRO_OVERRIDES = {
    "n_train": 4,
    "n_test": 2,
    "eval_clips": 2,
    "corpus_bytes": 60_000,
    "n_units": 12,
    "synth": {"count": 6, "min_duration": 4.0, "max_duration": 5.0, "style_count": 2},
    "codec": {"codebook_size": 16, "latent_dim": 16, "n_residual_layers": 2},
    "codec_train": {"steps": 30, "batch_size": 4},
    "model": {"d_model": 32, "n_layers": 1, "n_heads": 2},
    "stage0": {
        "stage": 0, "epochs": 1, "steps_per_epoch": 5, "batch_size": 4,
        "min_corpus_bytes": 50_000, "heldout_bytes": 10_000,
    },
    "stage1": {"stage": 1, "epochs": 1, "batch_size": 4},
    "stage2": {"stage": 2, "epochs": 1, "batch_size": 2},
    "stage3": {"stage": 3, "epochs": 1, "batch_size": 2},
    "metric": {"ae_feature_dim": 8},
}


@pytest.fixture(scope="module")
def micro_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps({"preset": "desk", "seed": 0, "overrides": MICRO_OVERRIDES}))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("run"))


def test_help_runs():
    with pytest.raises(SystemExit) as exit_info:
        main(["--help"])
    assert exit_info.value.code == 0


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as exit_info:
        main(["train-codec"])  # --part missing
    assert exit_info.value.code == 2


def test_bad_config_file_exits_2(tmp_path, workdir):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad), "--workdir", workdir]) == 2


def test_unknown_override_exits_2(tmp_path, workdir):
    bad = tmp_path / "bad2.json"
    bad.write_text(json.dumps({"preset": "desk", "overrides": {"nonsense_field": 1}}))
    assert main(["synth", "--config", str(bad), "--workdir", workdir]) == 2


def test_generate_without_checkpoints_exits_2(micro_config, tmp_path, workdir):
    wav = tmp_path / "in.wav"
    from meco.motion_io import save_wav

    save_wav(str(wav), np.zeros(16000, dtype=np.float32), 16000)
    code = main([
        "generate", "--config", micro_config, "--workdir", str(tmp_path / "empty_run"),
        "--audio", str(wav), "--out", str(tmp_path / "out.mecm"),
    ])
    assert code == 2  # missing prerequisite names the step


def test_synth_subcommand(micro_config, workdir):
    assert main(["synth", "--config", micro_config, "--workdir", workdir]) == 0
    assert os.path.exists(os.path.join(workdir, "data", "manifest.jsonl"))


def test_train_codec_subcommand(micro_config, workdir):
    for part in ("upper", "lower", "hands"):
        code = main(["train-codec", "--config", micro_config, "--workdir", workdir, "--part", part])
        assert code == 0
        assert os.path.exists(os.path.join(workdir, "codecs", f"{part}.mecq"))


def test_train_lm_stage_without_prereq_exits_2(micro_config, tmp_path):
    fresh = str(tmp_path / "fresh_run")
    code = main(["train-lm", "--config", micro_config, "--workdir", fresh, "--stage", "2"])
    assert code == 2


def test_pipeline_and_idempotence(micro_config, workdir, capsys):
    assert main(["pipeline", "--config", micro_config, "--workdir", workdir]) == 0
    manifest_path = os.path.join(workdir, "pipeline_manifest.json")
    manifest = json.load(open(manifest_path))
    report = os.path.join(workdir, "report", "report.jsonl")
    metrics = {json.loads(line)["metric"] for line in open(report)}
    assert {"fgd2", "fgd1", "bc", "div", "retention"} <= metrics
    # rerun: every step skipped, manifest byte-identical
    before = open(manifest_path, "rb").read()
    capsys.readouterr()
    assert main(["pipeline", "--config", micro_config, "--workdir", workdir]) == 0
    err = capsys.readouterr().err
    events = [json.loads(line) for line in err.splitlines() if line.strip()]
    assert all(e["event"] == "step_skipped" for e in events if "step" in e)
    assert open(manifest_path, "rb").read() == before


def test_corrupted_checkpoint_exits_3(micro_config, workdir, tmp_path):
    codec_path = os.path.join(workdir, "codecs", "upper.mecq")
    blob = bytearray(open(codec_path, "rb").read())
    blob[50] ^= 0xFF
    corrupt_dir = str(tmp_path / "corrupt_run")
    os.makedirs(os.path.join(corrupt_dir, "codecs"), exist_ok=True)
    import shutil

    for name in ("hands.mecq", "lower.mecq"):
        shutil.copyfile(os.path.join(workdir, "codecs", name), os.path.join(corrupt_dir, "codecs", name))
    open(os.path.join(corrupt_dir, "codecs", "upper.mecq"), "wb").write(bytes(blob))
    shutil.copytree(os.path.join(workdir, "units"), os.path.join(corrupt_dir, "units"))
    shutil.copytree(os.path.join(workdir, "lm"), os.path.join(corrupt_dir, "lm"))
    wav = tmp_path / "in.wav"
    from meco.motion_io import save_wav

    save_wav(str(wav), np.zeros(4 * 16000, dtype=np.float32), 16000)
    code = main([
        "generate", "--config", micro_config, "--workdir", corrupt_dir,
        "--audio", str(wav), "--out", str(tmp_path / "out.mecm"),
    ])
    assert code == 3


def test_generate_subcommand(micro_config, workdir, tmp_path):
    from meco.motion_io import load_motion, save_wav

    wav = tmp_path / "gen_in.wav"
    rng = np.random.default_rng(0)
    save_wav(str(wav), rng.normal(0, 0.01, size=5 * 16000).astype(np.float32), 16000)
    out = str(tmp_path / "gen_out.mecm")
    code = main([
        "generate", "--config", micro_config, "--workdir", workdir,
        "--audio", str(wav), "--out", out, "--beta", "5", "--gamma", "0.9", "--seed", "3",
    ])
    assert code == 0
    clip = load_motion(out)
    assert clip.n_frames > 0
    assert np.isfinite(clip.frames).all()


def test_generate_with_example_and_seed_pose(micro_config, workdir, tmp_path):
    from meco.motion_io import load_motion, save_wav
    from meco.synth import load_dataset

    samples = load_dataset(os.path.join(workdir, "data", "manifest.jsonl"))
    example_path = os.path.join(workdir, "data", f"{samples[-1].sample_id}.mecm")
    wav = tmp_path / "gen2_in.wav"
    save_wav(str(wav), samples[0].waveform, samples[0].sample_rate)
    out = str(tmp_path / "gen2_out.mecm")
    code = main([
        "generate", "--config", micro_config, "--workdir", workdir,
        "--audio", str(wav), "--example", example_path, "--seed-pose", example_path,
        "--out", out,
    ])
    assert code == 0
    assert load_motion(out).n_frames > 0


def test_evaluate_subcommand(micro_config, workdir, tmp_path):
    real = os.path.join(workdir, "data", "manifest.jsonl")
    gen = os.path.join(workdir, "gen", "manifest.jsonl")
    out = str(tmp_path / "report.jsonl")
    code = main([
        "evaluate", "--config", micro_config, "--workdir", workdir,
        "--real", real, "--generated", gen,
        "--metrics", "fgd2,bc,div", "--out", out,
    ])
    assert code == 0
    metrics = {json.loads(line)["metric"] for line in open(out)}
    assert metrics == {"fgd2", "bc", "div"}


def test_evaluate_unknown_metric_exits_2(micro_config, workdir, tmp_path):
    real = os.path.join(workdir, "data", "manifest.jsonl")
    code = main([
        "evaluate", "--config", micro_config, "--workdir", workdir,
        "--real", real, "--generated", real, "--metrics", "bogus",
        "--out", str(tmp_path / "r.jsonl"),
    ])
    assert code == 2
