import copy

import numpy as np
import pytest
import torch

from meco.errors import ConfigError, ContractViolationError, DataError
from meco.prompts import build_example_prompt, build_prompt, loss_mask, source_vocab_ids
from meco.seq_model import (
    ModelConfig,
    SeqModel,
    extend_vocab,
    freeze,
    save_model,
    trainable_parameters,
    unfreeze_all,
)
from meco.stages import (
    StageConfig,
    TokenizedSample,
    eval_text_perplexity,
    heldout_s2g_loss,
    heldout_stream_loss,
    masked_lm_loss,
    off_example_penalty,
    stage0_pretrain,
    stage1_embed_init,
    stage2_s2g,
    stage3_example_train,
)
from meco.synth import make_text_corpus
from meco.vocab import MOTION_PART_ORDER, VocabLayout, text_layout

TINY_LAYOUT = VocabLayout(n_audio=10, n_motion=8)
TINY_MODEL = ModelConfig(d_model=32, n_layers=2, n_heads=2, context=512)


def tiny_samples(n: int, rng, n_units=260, n_steps=39) -> list[TokenizedSample]:
    out = []
    for i in range(n):
        out.append(
            TokenizedSample(
                sample_id=f"t{i}",
                units=rng.integers(0, 10, size=n_units),
                codes={p: rng.integers(0, 8, size=n_steps) for p in MOTION_PART_ORDER},
                style_id=i % 2,
            )
        )
    return out


def fresh_extended(seed=0) -> SeqModel:
    base = SeqModel(TINY_MODEL, text_layout(), seed=seed)
    return extend_vocab(base, TINY_LAYOUT, seed=seed)


# ---- stage 0 ----------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus():
    return make_text_corpus(1, 140_000)


@pytest.fixture(scope="module")
def stage0_result(corpus):
    config = StageConfig(
        stage=0, lr=1e-3, batch_size=8, epochs=5, steps_per_epoch=25,
        chunk_len=128, min_corpus_bytes=100_000, heldout_bytes=20_000, seed=0,
    )
    return stage0_pretrain(corpus, TINY_MODEL, config), config


def test_stage0_beats_uniform_baseline(stage0_result, corpus):
    (model, _), config = stage0_result
    ppl = eval_text_perplexity(model, corpus[-config.heldout_bytes:], chunk_len=128)
    assert ppl < 256.0


def test_stage0_perplexity_improves_over_epochs(stage0_result):
    (_, history), _ = stage0_result
    ppls = [h["heldout_ppl"] for h in history if "heldout_ppl" in h]
    assert len(ppls) >= 2
    assert ppls[-1] < ppls[0]


def test_stage0_deterministic(corpus):
    config = StageConfig(
        stage=0, lr=1e-3, batch_size=4, epochs=1, steps_per_epoch=5,
        chunk_len=128, min_corpus_bytes=100_000, heldout_bytes=20_000, seed=3,
    )
    a, _ = stage0_pretrain(corpus, TINY_MODEL, config)
    b, _ = stage0_pretrain(corpus, TINY_MODEL, config)
    for key, val in a.state_dict().items():
        assert torch.equal(val, b.state_dict()[key]), key


def test_stage0_rejects_empty_and_small_corpus():
    config = StageConfig(stage=0, epochs=1)
    with pytest.raises(ConfigError):
        stage0_pretrain(b"", TINY_MODEL, config)
    with pytest.raises(ConfigError):
        stage0_pretrain(b"tiny", TINY_MODEL, config)


def test_uniform_predictor_perplexity_is_256():
    # analytic: -log(1/256) per byte -> exp gives exactly 256
    nll = -np.log(1.0 / 256.0)
    assert np.isclose(np.exp(nll), 256.0)


# ---- stage 1 ----------------------------------------------------------------


@pytest.fixture(scope="module")
def stage1_setup(rng_module):
    model = fresh_extended(seed=1)
    samples = tiny_samples(6, rng_module)
    return model, samples


@pytest.fixture(scope="module")
def rng_module():
    return np.random.default_rng(7)


def test_stage1_requires_frozen_backbone(stage1_setup):
    model, samples = stage1_setup
    model = copy.deepcopy(model)
    unfreeze_all(model)
    with pytest.raises(ContractViolationError):
        stage1_embed_init(model, samples, StageConfig(stage=1, epochs=1))


def test_stage1_backbone_bitwise_invariant(stage1_setup):
    model, samples = stage1_setup
    model = copy.deepcopy(model)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    freeze(model, {"backbone"})
    stage1_embed_init(model, samples, StageConfig(stage=1, lr=1e-3, batch_size=4, epochs=2, seed=0))
    names = {id(p): n for n, p in model.named_parameters()}
    state = model.state_dict()
    for p in model.param_groups()["backbone"]:
        assert torch.equal(state[names[id(p)]], before[names[id(p)]]), names[id(p)]
    # new-token rows moved away from their init
    assert not torch.equal(state["token_emb.weight"], before["token_emb.weight"])
    assert not torch.equal(state["out_proj.weight"], before["out_proj.weight"])


def test_stage1_improves_heldout_stream_loss(stage1_setup, rng_module):
    model, samples = stage1_setup
    model = copy.deepcopy(model)
    held = tiny_samples(3, rng_module)
    before = heldout_stream_loss(model, held, "motion")
    freeze(model, {"backbone"})
    stage1_embed_init(model, samples, StageConfig(stage=1, lr=2e-3, batch_size=4, epochs=6, seed=0))
    after = heldout_stream_loss(model, held, "motion")
    assert after < before


def test_stage1_ablation_requires_all_trainable(stage1_setup):
    model, samples = stage1_setup
    model = copy.deepcopy(model)
    freeze(model, {"backbone"})
    with pytest.raises(ContractViolationError):
        stage1_embed_init(
            model, samples, StageConfig(stage=1, epochs=1, freeze_backbone=False)
        )


# ---- loss masking and penalty ------------------------------------------------


def test_stage2_mask_covers_exactly_motion_positions(rng):
    layout = VocabLayout(n_audio=100, n_motion=128)
    units = rng.integers(0, 100, size=200)
    codes = {p: rng.integers(0, 128, size=30) for p in MOTION_PART_ORDER}
    from meco.prompts import ExamplePrompt

    prompt = build_prompt(layout, ExamplePrompt.empty(), units, codes)
    mask = loss_mask(prompt)
    # hand-built mask: 7 specials + 200 audio frame the 90 motion targets
    hand = np.zeros(prompt.tokens.size, dtype=bool)
    hand[6 + 200 : 6 + 200 + 90] = True
    assert mask.sum() == 90
    assert np.array_equal(mask, hand)


def test_penalty_hand_example():
    layout = VocabLayout(n_audio=0, n_motion=1)  # motion vocab {a, b, c}
    # build logits whose softmax over the motion columns is (0.5, 0.3, 0.2)
    cols = [layout.motion_token("upper", 0), layout.motion_token("hands", 0), layout.motion_token("lower", 0)]
    logits = torch.full((layout.size,), -1e9)
    for c, p in zip(cols, (0.5, 0.3, 0.2)):
        logits[c] = float(np.log(p))
    value, warned = off_example_penalty(logits, frozenset({cols[0]}), layout)
    assert not warned
    assert abs(float(value) - 0.5) < 1e-6


def test_penalty_zero_when_example_covers_vocab():
    layout = VocabLayout(n_audio=0, n_motion=2)
    logits = torch.randn(layout.size)
    full = frozenset(
        layout.motion_token(p, c) for p in MOTION_PART_ORDER for c in range(2)
    )
    value, warned = off_example_penalty(logits, full, layout)
    assert float(value) == 0.0
    assert not warned


def test_penalty_empty_set_is_zero_with_warning():
    layout = VocabLayout(n_audio=0, n_motion=2)
    value, warned = off_example_penalty(torch.randn(layout.size), frozenset(), layout)
    assert float(value) == 0.0
    assert warned


def test_penalty_bounded_by_step_count(rng):
    layout = VocabLayout(n_audio=4, n_motion=8)
    steps = torch.randn(17, layout.size)
    value, _ = off_example_penalty(steps, frozenset({layout.motion_token("upper", 0)}), layout)
    assert 0.0 <= float(value) <= 17.0


# ---- stages 2 and 3 -----------------------------------------------------------


@pytest.fixture(scope="module")
def sft_setup(rng_module):
    model = fresh_extended(seed=2)
    freeze(model, {"backbone"})
    train = tiny_samples(6, rng_module)
    held = tiny_samples(3, rng_module)
    stage1_embed_init(model, train, StageConfig(stage=1, lr=2e-3, batch_size=4, epochs=4, seed=0))
    unfreeze_all(model)
    return model, train, held


def test_stage2_improves_heldout_s2g(sft_setup):
    model, train, held = sft_setup
    model = copy.deepcopy(model)
    before = heldout_s2g_loss(model, held)
    stage2_s2g(model, train, StageConfig(stage=2, lr=1e-3, batch_size=4, epochs=6, seed=0))
    after = heldout_s2g_loss(model, held)
    assert after < before


def test_stage2_requires_all_trainable(sft_setup):
    model, train, _ = sft_setup
    model = copy.deepcopy(model)
    freeze(model, {"backbone"})
    with pytest.raises(ContractViolationError):
        stage2_s2g(model, train, StageConfig(stage=2, epochs=1))


def test_stage2_rejects_sample_missing_modalities(sft_setup, rng):
    model, _, _ = sft_setup
    model = copy.deepcopy(model)
    broken = TokenizedSample(
        sample_id="broken",
        units=np.zeros(0, dtype=np.int64),
        codes={p: rng.integers(0, 8, size=39) for p in MOTION_PART_ORDER},
    )
    with pytest.raises(DataError):
        stage2_s2g(model, [broken], StageConfig(stage=2, epochs=1))


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        StageConfig(stage=3, lambda_penalty=-0.1)


def test_stage3_lambda_zero_never_computes_penalty(sft_setup, monkeypatch):
    model, train, _ = sft_setup
    model = copy.deepcopy(model)

    def boom(*args, **kwargs):
        raise AssertionError("penalty must not be computed when lambda is 0")

    monkeypatch.setattr("meco.stages._batched_penalty", boom)
    history = stage3_example_train(
        model, train, StageConfig(stage=3, lr=1e-3, batch_size=4, epochs=1, lambda_penalty=0.0, seed=0)
    )
    assert all(h["penalty"] == 0.0 for h in history)


def test_stage3_penalty_recorded_when_active(sft_setup):
    model, train, _ = sft_setup
    model = copy.deepcopy(model)
    history = stage3_example_train(
        model, train, StageConfig(stage=3, lr=1e-3, batch_size=4, epochs=1, lambda_penalty=0.1, seed=0)
    )
    assert any(h["penalty"] > 0.0 for h in history)


def test_stage3_gradient_matches_finite_differences(rng):
    """Total stage-3 loss (masked CE + lambda * off-example penalty) against
    central finite differences on a float64 toy model."""
    layout = VocabLayout(n_audio=4, n_motion=4)
    model = SeqModel(ModelConfig(d_model=16, n_layers=2, n_heads=2, context=512), layout, seed=5)
    model.double()
    lam = 0.1
    units = rng.integers(0, 4, size=200)
    codes = {p: rng.integers(0, 4, size=30) for p in MOTION_PART_ORDER}
    example = build_example_prompt({p: codes[p][:20] for p in codes}, 0.0, seed=3)
    prompt = build_prompt(layout, example, units, codes)
    tokens = torch.from_numpy(prompt.tokens)[None]
    sup = torch.from_numpy(loss_mask(prompt))[None]
    source = source_vocab_ids(layout, example)

    def loss_fn():
        ce, logits = masked_lm_loss(model, tokens, sup)
        mask = sup[:, 1:]
        pos = torch.nonzero(mask[0], as_tuple=True)[0]
        pen, _ = off_example_penalty(logits[0, pos], source, layout)
        return ce + lam * pen / pos.numel()

    loss = loss_fn()
    params = list(model.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    eps = 1e-6
    fd_vals, an_vals = [], []
    for p, g in zip(params, grads):
        if g is None:
            continue
        flat, gflat = p.data.view(-1), g.reshape(-1)
        take = rng.choice(flat.numel(), size=min(8, flat.numel()), replace=False)
        for i in take:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
            fd_vals.append((up - down) / (2 * eps))
            an_vals.append(float(gflat[i]))
    fd, an = np.array(fd_vals), np.array(an_vals)
    rel = np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an))
    assert rel < 1e-4, f"relative gradient error {rel:.2e}"


def test_crop_alignment(rng):
    ts = tiny_samples(1, rng, n_units=260, n_steps=39)[0]
    units, codes = ts.crop(2)
    assert units.size == 200
    assert np.array_equal(units, ts.units[40:240])
    for p in MOTION_PART_ORDER:
        assert np.array_equal(codes[p], ts.codes[p][6:36])
    assert ts.max_crop() == 3  # min((39-30)//3, (260-200)//20)
