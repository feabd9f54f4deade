import json
import os

import pytest

from meco.errors import ConfigError, MissingArtifactError
from meco.pipeline import (
    PipelineRun,
    RunConfig,
    canonical_config_json,
    config_hash,
    desk_config,
    load_run_config,
    make_config,
    paper_config,
)


def test_paper_preset_pins_published_values():
    cfg = paper_config()
    assert cfg.codec.codebook_size == 512
    assert cfg.codec.latent_dim == 512
    assert cfg.codec.n_residual_layers == 6
    assert cfg.codec.eta == 0.1
    assert cfg.codec_train.lr == 4e-4
    assert (cfg.stage1.batch_size, cfg.stage2.batch_size, cfg.stage3.batch_size) == (32, 20, 12)
    assert (cfg.stage1.grad_accum, cfg.stage2.grad_accum, cfg.stage3.grad_accum) == (4, 6, 10)
    assert (cfg.stage1.lr, cfg.stage2.lr, cfg.stage3.lr) == (2e-4, 5e-5, 5e-5)
    assert cfg.sampler.beta == 5.0
    assert cfg.sampler.gamma == 0.9


def test_desk_preset_keeps_stage_lr_ratio():
    cfg = desk_config()
    assert cfg.stage1.lr == pytest.approx(4 * cfg.stage2.lr)
    assert cfg.stage2.lr == cfg.stage3.lr
    assert cfg.codec.eta == 0.1
    assert cfg.sampler.beta == 5.0 and cfg.sampler.gamma == 0.9


def test_canonical_json_is_stable_and_hashable():
    a = desk_config()
    b = desk_config()
    assert canonical_config_json(a) == canonical_config_json(b)
    assert config_hash(a) == config_hash(b)
    b.seed = 1
    assert config_hash(a) != config_hash(b)


def test_overrides_apply_nested():
    cfg = make_config("desk", seed=2, overrides={"codec": {"codebook_size": 64}, "n_units": 50})
    assert cfg.codec.codebook_size == 64
    assert cfg.n_units == 50
    assert cfg.seed == 2


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        make_config("desk", overrides={"bogus": 1})


def test_count_must_match_split():
    with pytest.raises(ConfigError):
        RunConfig(n_train=10, n_test=10)  # synth.count defaults to 64


def test_load_run_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "desk", "seed": 9, "overrides": {"eval_clips": 5}}))
    cfg = load_run_config(str(path))
    assert cfg.seed == 9
    assert cfg.eval_clips == 5
    bad = tmp_path / "bad.json"
    bad.write_text("nope{")
    with pytest.raises(ConfigError):
        load_run_config(str(bad))


def test_missing_artifact_error_names_step(tmp_path):
    run = PipelineRun(desk_config(), str(tmp_path))
    with pytest.raises(MissingArtifactError) as err:
        run.data_manifest()
    assert "synth" in str(err.value)
    with pytest.raises(MissingArtifactError) as err:
        run.load_codecs()
    assert "codec" in str(err.value)


def test_step_done_detects_artifact_changes(tmp_path):
    cfg = desk_config()
    run = PipelineRun(cfg, str(tmp_path))
    art = run.path("data", "dummy.bin")
    open(art, "wb").write(b"hello")
    run._record_step("synth", [art])
    assert run._step_done("synth")
    open(art, "wb").write(b"tampered")
    assert not run._step_done("synth")
    # config change also invalidates
    open(art, "wb").write(b"hello")
    assert run._step_done("synth")
    cfg2 = desk_config(seed=5)
    run2 = PipelineRun(cfg2, str(tmp_path))
    assert not run2._step_done("synth")
