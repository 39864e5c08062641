import numpy as np
import pytest

from mezofit.memory import ConfigError, ModelConfig, ParamCountMode, param_elements
from mezofit.model import (
    ActivationLedger,
    LedgerMode,
    ToyTransformer,
    compare_ledger_scaling,
    ledger_check,
    load_weights,
    loss_from_logits,
    save_weights,
)
from mezofit.verify import check_fd_gradient

CFG = ModelConfig(context_length=8, num_layers=2, hidden_dim=16, num_heads=4,
                  vocab_size=32, batch_size=2)


@pytest.fixture(scope="module")
def model():
    return ToyTransformer(CFG)


@pytest.fixture(scope="module")
def params(model):
    return model.init_params(7)


def tokens_for(cfg, seed=3, batch=None):
    rng = np.random.default_rng(seed)
    b = batch if batch is not None else cfg.batch_size
    return rng.integers(0, cfg.vocab_size, size=(b, cfg.context_length))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_forward_single_token(model, params):
    logits, _ = model.forward(params, np.array([[5]]))
    assert logits.shape == (1, 1, 32)
    assert np.all(np.isfinite(logits))


def test_forward_zero_head_gives_zero_logits(model):
    params = model.init_params(7)
    params.values[:] = 0.0
    params.segment("embed")[:] = 1.0  # any embedding; head of zeros kills it
    logits, _ = model.forward(params, tokens_for(CFG))
    assert np.all(logits == 0.0)


def test_forward_bit_stable_and_golden(model):
    params = model.init_params(2024)
    tokens = np.arange(8).reshape(1, 8) % 32
    a, _ = model.forward(params, tokens)
    b, _ = model.forward(params, tokens)
    assert a.tobytes() == b.tobytes()
    # frozen snapshot values generated once from this implementation
    assert float(a.sum()) == pytest.approx(23.38793084604861, rel=1e-10)
    assert a[0, 0, 0] == pytest.approx(1.1795054831278684, rel=1e-10)
    assert a[0, 3, 7] == pytest.approx(1.9868070595769118, rel=1e-10)
    assert a[0, 7, 31] == pytest.approx(-0.2100255451765242, rel=1e-10)
    assert a[0, 5, 16] == pytest.approx(-1.3939548230480003, rel=1e-10)


def test_forward_rejects_bad_tokens(model, params):
    with pytest.raises(ValueError, match="out of range"):
        model.forward(params, np.array([[32]]))
    with pytest.raises(ValueError, match="out of range"):
        model.forward(params, np.array([[-1]]))
    with pytest.raises(ValueError, match="context_length"):
        model.forward(params, np.zeros((1, 9), dtype=int))
    with pytest.raises(ValueError, match="batch"):
        model.forward(params, np.zeros(4, dtype=int))


def test_causality(model, params):
    tokens = tokens_for(CFG, seed=11)
    base, _ = model.forward(params, tokens)
    for j in (1, 4, 7):
        changed = tokens.copy()
        changed[:, j] = (changed[:, j] + 1) % CFG.vocab_size
        out, _ = model.forward(params, changed)
        assert np.array_equal(base[:, :j], out[:, :j])
        assert not np.array_equal(base[:, j:], out[:, j:])


def test_attention_softmax_rows_sum_to_one(model, params):
    _, caches, _ = model._forward_impl(params, tokens_for(CFG), LedgerMode.BP)
    for c in caches["layers"]:
        sums = c["probs"].sum(axis=-1)
        assert np.all(np.abs(sums - 1.0) < 1e-12)
    logits = caches["logits"]
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    assert np.all(np.abs(p.sum(-1) - 1.0) < 1e-12)


def test_param_count_matches_generic_formula(model, params):
    expected = (param_elements(CFG, ParamCountMode.GENERIC)
                + (2 * CFG.num_layers + 1) * CFG.hidden_dim)
    assert len(params) == expected == model.param_count()


def test_toy_config_validation():
    with pytest.raises(ConfigError, match="kv_heads"):
        ToyTransformer(CFG.replace(kv_heads=2))
    with pytest.raises(ConfigError, match="num_mlps"):
        ToyTransformer(CFG.replace(num_mlps=3))
    with pytest.raises(ConfigError, match="even"):
        # head_dim = 21/7 = 3
        ToyTransformer(ModelConfig(context_length=8, num_layers=1,
                                   hidden_dim=21, num_heads=7, vocab_size=8))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_uniform_logits_is_log_vocab():
    logits = np.zeros((2, 5, 32))
    targets = np.zeros((2, 5), dtype=int)
    assert loss_from_logits(logits, targets) == pytest.approx(np.log(32), rel=1e-14)


def test_loss_one_hot_margin_goes_to_zero():
    logits = np.full((1, 3, 8), -50.0)
    targets = np.array([[1, 5, 2]])
    for i, t in enumerate(targets[0]):
        logits[0, i, t] = 50.0
    assert loss_from_logits(logits, targets) < 1e-12


def test_loss_matches_naive_log_softmax_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((3, 6, 17)) * 4
    targets = rng.integers(0, 17, size=(3, 6))
    targets[0, 2] = -1  # masked position
    total, count = 0.0, 0
    for b in range(3):
        for n in range(6):
            if targets[b, n] < 0:
                continue
            row = logits[b, n]
            total += -(row[targets[b, n]] - np.log(np.sum(np.exp(row))))
            count += 1
    assert loss_from_logits(logits, targets) == pytest.approx(total / count, rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError, match="match"):
        loss_from_logits(np.zeros((1, 4, 8)), np.zeros((1, 5), dtype=int))
    with pytest.raises(ValueError, match="unmasked"):
        loss_from_logits(np.zeros((1, 2, 8)), np.full((1, 2), -1))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_matches_finite_differences():
    result = check_fd_gradient(ncoords=200, seed=0, tol=1e-5)
    assert result.passed, result.detail


def test_backward_unused_embedding_row_has_zero_gradient(model, params):
    tokens = np.full((2, 8), 3)
    targets = np.full((2, 8), 4)
    grad, _ = model.backward(params, tokens, targets)
    gemb = grad.view("embed", (32, 16))
    assert np.all(gemb[7] == 0.0)  # token 7 never appears
    assert np.any(gemb[3] != 0.0)


def test_backward_loss_matches_forward_loss(model, params):
    tokens = tokens_for(CFG, seed=5)
    targets = tokens_for(CFG, seed=6)
    logits, _ = model.forward(params, tokens)
    grad, loss = model.backward(params, tokens, targets)
    assert loss == pytest.approx(loss_from_logits(logits, targets), rel=1e-15)
    assert np.all(np.isfinite(grad.values))


# ---------------------------------------------------------------------------
# activation ledger
# ---------------------------------------------------------------------------

def test_ledger_bp_counts(model, params):
    _, ledger = model.forward(params, tokens_for(CFG))
    B, N, D, L, H, R = 2, 8, 16, 2, 4, 4
    assert ledger.attention_scores_elements == B * L * H * N * N
    assert ledger.embeddings_elements == B * N * D
    assert ledger.attention_proj_elements == 5 * L * B * N * D
    assert ledger.ffn_elements == (1 + 2 * R) * L * B * N * D
    assert ledger.logits_elements == B * N * 32
    report = ledger_check(CFG, ledger)
    assert report.ok, report.problems
    assert report.per_bnld_constant > 0


def test_ledger_doubling_context_quadruples_scores(model, params):
    cfg2 = CFG.replace(context_length=16)
    model2 = ToyTransformer(cfg2)
    params2 = model2.init_params(7)
    _, base = model.forward(params, tokens_for(CFG))
    _, doubled = model2.forward(params2, tokens_for(cfg2))
    assert doubled.attention_scores_elements == 4 * base.attention_scores_elements
    assert compare_ledger_scaling(CFG, base, cfg2, doubled) == []


def test_ledger_doubling_hidden_dim_doubles_linear_categories(model, params):
    cfg2 = CFG.replace(hidden_dim=32)
    model2 = ToyTransformer(cfg2)
    params2 = model2.init_params(7)
    _, base = model.forward(params, tokens_for(CFG))
    _, doubled = model2.forward(params2, tokens_for(cfg2))
    assert doubled.ffn_elements == 2 * base.ffn_elements
    assert doubled.attention_proj_elements == 2 * base.attention_proj_elements
    assert doubled.attention_scores_elements == base.attention_scores_elements
    assert compare_ledger_scaling(CFG, base, cfg2, doubled) == []


def test_ledger_scaling_flags_violations():
    _, base = ToyTransformer(CFG).forward(ToyTransformer(CFG).init_params(0),
                                          tokens_for(CFG))
    import dataclasses
    broken = dataclasses.replace(base, attention_scores_elements=base.attention_scores_elements + 1)
    cfg2 = CFG.replace(context_length=16)
    flags = compare_ledger_scaling(CFG, base, cfg2, broken)
    assert any("quadratic" in f for f in flags)
    with pytest.raises(ValueError, match="doubling"):
        compare_ledger_scaling(CFG, base, CFG.replace(num_layers=4), base)


def test_ledger_mezo_retains_one_layer_of_four():
    cfg = ModelConfig(context_length=8, num_layers=4, hidden_dim=16,
                      num_heads=4, vocab_size=32, batch_size=2, stored_layers=1.0)
    model = ToyTransformer(cfg)
    params = model.init_params(1)
    tokens = tokens_for(cfg)
    _, bp = model.forward(params, tokens, mode=LedgerMode.BP)
    _, mz = model.forward(params, tokens, mode=LedgerMode.MEZO)
    assert mz.mode is LedgerMode.MEZO
    assert mz.per_layer_elements() <= bp.per_layer_elements() / cfg.num_layers
    assert mz.per_layer_elements() > 0
    report = ledger_check(cfg, mz)
    assert report.ok, report.problems


def test_ledger_mezo_zero_stored_layers_retains_nothing():
    cfg = CFG.replace(stored_layers=0.0)
    model = ToyTransformer(cfg)
    _, mz = model.forward(model.init_params(1), tokens_for(cfg),
                          mode=LedgerMode.MEZO)
    assert mz.per_layer_elements() == 0
    assert mz.embeddings_elements == 0
    assert mz.logits_elements > 0  # the loss still needs the logits


def test_ledger_check_flags_bad_bp_scores():
    _, ledger = ToyTransformer(CFG).forward(ToyTransformer(CFG).init_params(0),
                                            tokens_for(CFG))
    import dataclasses
    broken = dataclasses.replace(ledger, attention_scores_elements=1)
    report = ledger_check(CFG, broken)
    assert not report.ok
    assert "B*L*H*N^2" in report.problems[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, model, params):
    path = tmp_path / "weights.mzfw"
    save_weights(path, CFG, params)
    cfg2, params2 = load_weights(path)
    assert cfg2 == CFG
    assert params2.values.tobytes() == params.values.tobytes()
    assert params2.segments == params.segments


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="checkpoint"):
        load_weights(path)
