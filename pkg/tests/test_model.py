"""Full-model forward/backward against finite differences.

The backward engine is checked two ways:
  * soft variant (dense tempered-softmax routing): the engine computes the
    exact gradient of that smooth forward, so central differences of the loss
    must match for every parameter;
  * hard variant: routing indices are locally constant, so for every
    parameter that does not feed the routing scores (nets, input maps,
    readout) finite differences of the actual hardmax forward must match.
"""

import numpy as np
import numpy.testing as npt
import pytest

from pdssm import model as md
from pdssm import scan
from pdssm import transition_gen as tg


def small_config(**kw):
    base = dict(vocab=5, dim=4, state=6, bank=3, hidden=5, depth=1, n_classes=3,
                mode="pd", readout="linear", residual=False, norm=False, tau=1.0)
    base.update(kw)
    return md.ModelConfig(**base)


def loss_of(params, tokens, labels, lengths=None, variant="soft", per_position=False,
            pos_labels=None):
    logits, _ = md.forward_batch(params, tokens, lengths=lengths, p_variant=variant,
                                 per_position=per_position, want_tape=False)
    if per_position:
        return md.cross_entropy_positions(logits, pos_labels, lengths)[0]
    return md.cross_entropy_final(logits, labels)[0]


def backward_of(params, tokens, labels, lengths=None, variant="soft", per_position=False,
                pos_labels=None):
    logits, tape = md.forward_batch(params, tokens, lengths=lengths, p_variant=variant,
                                    per_position=per_position)
    if per_position:
        _, gl = md.cross_entropy_positions(logits, pos_labels, lengths)
    else:
        _, gl = md.cross_entropy_final(logits, labels)
    return md.model_backward(tape, gl)


def fd_check(params, grads, loss_fn, names, rng, entries=4, h=1e-6, tol=2e-5):
    flat = md.flatten_params(params)
    for name in names:
        arr = flat[name]
        g = grads[name]
        assert g.shape == arr.shape, name
        picks = rng.choice(arr.size, size=min(entries, arr.size), replace=False)
        for i in picks:
            orig = arr.reshape(-1)[i]
            arr.reshape(-1)[i] = orig + h
            hi = loss_fn()
            arr.reshape(-1)[i] = orig - h
            lo = loss_fn()
            arr.reshape(-1)[i] = orig
            fd = (hi - lo) / (2 * h)
            got = g.reshape(-1)[i]
            assert abs(fd - got) / max(abs(fd), 1e-4) < tol, (name, i, fd, got)


@pytest.mark.parametrize("depth,readout,mode,norm,residual", [
    (1, "linear", "pd", False, False),
    (1, "nonlinear", "pd", False, False),
    (2, "linear", "pd", True, True),
    (2, "nonlinear", "pd", True, False),
    (1, "linear", "complex_diagonal", False, False),
    (1, "linear", "real_diagonal", False, False),
])
def test_soft_surrogate_gradients_match_fd(depth, readout, mode, norm, residual):
    rng = np.random.default_rng(17)
    cfg = small_config(depth=depth, readout=readout, mode=mode, norm=norm,
                       residual=residual)
    params = md.init_model(cfg, seed=3)
    tokens = rng.integers(0, cfg.vocab, size=(2, 8))
    labels = rng.integers(0, cfg.n_classes, size=2)
    grads = backward_of(params, tokens, labels, variant="soft")
    fd_check(params, grads, lambda: loss_of(params, tokens, labels, variant="soft"),
             list(grads), rng)


def test_hard_path_gradients_match_fd_for_non_routing_params():
    rng = np.random.default_rng(18)
    cfg = small_config()
    params = md.init_model(cfg, seed=4)
    tokens = rng.integers(0, cfg.vocab, size=(3, 7))
    labels = rng.integers(0, cfg.n_classes, size=3)
    grads = backward_of(params, tokens, labels, variant="hard")
    names = [n for n in grads
             if ".gen.S" not in n and ".gen.bank" not in n and n != "embed"]
    assert any(".b_in" in n for n in names) and any("readout" in n for n in names)
    fd_check(params, grads, lambda: loss_of(params, tokens, labels, variant="hard"),
             names, rng)


def test_dedup_and_general_paths_agree():
    rng = np.random.default_rng(19)
    cfg = small_config()
    params = md.init_model(cfg, seed=5)
    tokens = rng.integers(0, cfg.vocab, size=(4, 9))
    labels = rng.integers(0, cfg.n_classes, size=4)
    out = []
    for dedup in (True, False):
        logits, tape = md.forward_batch(params, tokens, p_variant="hard", dedup=dedup)
        _, gl = md.cross_entropy_final(logits, labels)
        out.append((logits, md.model_backward(tape, gl)))
    npt.assert_allclose(out[0][0], out[1][0], atol=1e-13)
    for name in out[0][1]:
        npt.assert_allclose(out[0][1][name], out[1][1][name], atol=1e-11, err_msg=name)


def test_variable_lengths_match_truncated_sequences():
    rng = np.random.default_rng(20)
    cfg = small_config(depth=2, norm=True, residual=True)
    params = md.init_model(cfg, seed=6)
    tokens = rng.integers(0, cfg.vocab, size=(3, 10))
    lengths = np.array([4, 10, 7])
    logits, _ = md.forward_batch(params, tokens, lengths=lengths, want_tape=False)
    for i, ln in enumerate(lengths):
        solo, _ = md.forward_batch(params, tokens[i:i + 1, :ln], want_tape=False)
        npt.assert_allclose(logits[i], solo[0], atol=1e-12)


def test_per_position_gradients_match_fd():
    rng = np.random.default_rng(21)
    cfg = small_config()
    params = md.init_model(cfg, seed=7)
    tokens = rng.integers(0, cfg.vocab, size=(2, 6))
    lengths = np.array([6, 4])
    pos_labels = rng.integers(0, cfg.n_classes, size=(2, 6))
    grads = backward_of(params, tokens, None, lengths=lengths, variant="soft",
                        per_position=True, pos_labels=pos_labels)
    fd_check(params, grads,
             lambda: loss_of(params, tokens, None, lengths=lengths, variant="soft",
                             per_position=True, pos_labels=pos_labels),
             list(grads), rng, entries=3)


def test_skip_diagonal_term_gradients():
    rng = np.random.default_rng(22)
    cfg = small_config(depth=2, norm=True, residual=True, skip_diag=True)
    params = md.init_model(cfg, seed=8)
    tokens = rng.integers(0, cfg.vocab, size=(2, 5))
    labels = rng.integers(0, cfg.n_classes, size=2)
    grads = backward_of(params, tokens, labels, variant="soft")
    assert "layers.0.skip" in grads
    fd_check(params, grads, lambda: loss_of(params, tokens, labels, variant="soft"),
             ["layers.0.skip"], rng)


def force_identity_routing(params):
    for layer in params.layers:
        layer.gen.bank[:] = 0.0
        for k in range(layer.gen.bank.shape[0]):
            layer.gen.bank[k][np.diag_indices_from(layer.gen.bank[k])] = 10.0
    params.bump()


def test_mode_reduction_pd_equals_complex_diagonal():
    rng = np.random.default_rng(23)
    cfg_pd = small_config()
    cfg_cd = small_config(mode="complex_diagonal")
    pd = md.init_model(cfg_pd, seed=9)
    force_identity_routing(pd)
    cd = md.init_model(cfg_cd, seed=10)
    # share everything the reduced mode has
    cd.embed[:] = pd.embed
    for lp, lc in zip(pd.layers, cd.layers):
        for f in ("wm_i", "bm_i", "wm_o", "bm_o", "wp_i", "bp_i", "wp_o", "bp_o"):
            getattr(lc.gen, f)[:] = getattr(lp.gen, f)
        lc.b_in_re[:] = lp.b_in_re
        lc.b_in_im[:] = lp.b_in_im
    cd.readout["w"][:] = pd.readout["w"]
    cd.readout["b"][:] = pd.readout["b"]
    cd.bump()
    tokens = rng.integers(0, 5, size=(2, 12))
    a, _ = md.forward_batch(pd, tokens, want_tape=False)
    b, _ = md.forward_batch(cd, tokens, want_tape=False)
    assert np.array_equal(a, b)  # identical bitwise


def test_mode_reduction_complex_equals_real_diagonal_with_zero_phase():
    rng = np.random.default_rng(24)
    cd = md.init_model(small_config(mode="complex_diagonal"), seed=11)
    rd = md.init_model(small_config(mode="real_diagonal"), seed=12)
    # saturate the phase net so it underflows to exactly zero phase
    for layer in cd.layers:
        layer.gen.wp_i[:] = 0.0
        layer.gen.bp_i[:] = 0.0
        layer.gen.bp_o[:] = 1.0
        layer.gen.wp_o[:] = -800.0 / layer.gen.wp_o.shape[1]
    cd.embed[:] = rd.embed
    for lc, lr in zip(cd.layers, rd.layers):
        for f in ("wm_i", "bm_i", "wm_o", "bm_o"):
            getattr(lc.gen, f)[:] = getattr(lr.gen, f)
        lc.b_in_re[:] = lr.b_in_re
        lc.b_in_im[:] = lr.b_in_im
    cd.readout["w"][:] = rd.readout["w"]
    cd.readout["b"][:] = rd.readout["b"]
    cd.bump()
    tokens = rng.integers(0, 5, size=(2, 12))
    a, _ = md.forward_batch(cd, tokens, want_tape=False)
    b, _ = md.forward_batch(rd, tokens, want_tape=False)
    assert np.array_equal(a, b)


def test_cross_entropy_frozen_and_grad():
    loss, grad = md.cross_entropy_final(np.zeros((1, 2)), np.array([0]))
    npt.assert_allclose(loss, np.log(2.0), rtol=1e-15)
    npt.assert_allclose(grad, [[-0.5, 0.5]], rtol=1e-15)
    # batch averaging
    loss2, grad2 = md.cross_entropy_final(np.zeros((4, 2)), np.zeros(4, dtype=int))
    npt.assert_allclose(loss2, np.log(2.0), rtol=1e-15)
    npt.assert_allclose(grad2[0], [-0.125, 0.125], rtol=1e-15)


def test_oov_token_rejected():
    params = md.init_model(small_config(), seed=0)
    with pytest.raises(ValueError):
        md.forward_batch(params, np.array([[0, 5]]))


def test_stale_tape_rejected():
    rng = np.random.default_rng(25)
    params = md.init_model(small_config(), seed=0)
    logits, tape = md.forward_batch(params, rng.integers(0, 5, size=(1, 4)))
    params.embed[0, 0] += 1.0
    params.bump()
    with pytest.raises(ValueError):
        md.model_backward(tape, np.zeros_like(logits))


def test_stochastic_variant_runs_and_is_seeded():
    rng = np.random.default_rng(26)
    params = md.init_model(small_config(state=8), seed=1)
    tokens = rng.integers(0, 5, size=(2, 30))
    a, _ = md.forward_batch(params, tokens, p_variant="stochastic",
                            rng=np.random.default_rng(0), want_tape=False)
    b, _ = md.forward_batch(params, tokens, p_variant="stochastic",
                            rng=np.random.default_rng(0), want_tape=False)
    assert np.array_equal(a, b)
    # gradients flow through the sampled surrogate
    logits, tape = md.forward_batch(params, tokens, p_variant="stochastic",
                                    rng=np.random.default_rng(1))
    _, gl = md.cross_entropy_final(logits, np.array([0, 1]))
    grads = md.model_backward(tape, gl)
    assert np.any(grads["layers.0.gen.bank"] != 0)


def test_stochastic_padding_content_is_inert():
    # routing noise is drawn only inside each sequence's length, so editing
    # tokens beyond the lengths must change neither the loss nor any gradient
    rng = np.random.default_rng(27)
    params = md.init_model(small_config(state=8), seed=2)
    lengths = np.array([3, 9, 6])
    tokens = rng.integers(0, 5, size=(3, 9))
    mangled = tokens.copy()
    for i, n in enumerate(lengths):
        mangled[i, n:] = (tokens[i, n:] + 1 + rng.integers(0, 4, size=9 - n)) % 5
    y = np.array([0, 1, 0])
    out = []
    for toks in (tokens, mangled):
        logits, tape = md.forward_batch(params, toks, lengths=lengths,
                                        p_variant="stochastic",
                                        rng=np.random.default_rng(5))
        loss, gl = md.cross_entropy_final(logits, y)
        out.append((loss, md.model_backward(tape, gl)))
    assert out[0][0] == out[1][0]
    for name in out[0][1]:
        assert np.array_equal(out[0][1][name], out[1][1][name]), name


def test_checkpoint_round_trip_bitwise(tmp_path):
    cfg = small_config(depth=2, norm=True, residual=True, readout="nonlinear")
    params = md.init_model(cfg, seed=13)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(path, params)
    loaded = md.load_checkpoint(path, cfg)
    a, b = md.flatten_params(params), md.flatten_params(loaded)
    assert set(a) == set(b)
    for name in a:
        assert np.array_equal(a[name], b[name]), name


def test_checkpoint_validates_config(tmp_path):
    params = md.init_model(small_config(), seed=14)
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(path, params)
    with pytest.raises(ValueError):
        md.load_checkpoint(path, small_config(state=7))
    with pytest.raises(ValueError):
        md.load_checkpoint(path, small_config(readout="nonlinear"))
    blob = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(ValueError):
        md.load_checkpoint(bad, small_config())
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(blob[:-9])
    with pytest.raises(ValueError):
        md.load_checkpoint(trunc, small_config())


def test_state_norms_respect_capped_bound():
    # transitions capped at 1 - eps and unit-bounded inputs keep state norms
    # under sqrt(N) * B / eps at every step
    rng = np.random.default_rng(27)
    n, d, eps, steps = 8, 3, 0.1, 2000
    gen = tg.PdGeneratorParams(
        S=rng.uniform(-1, 1, (2, d)), bank=rng.standard_normal((2, n, n)),
        wm_i=rng.uniform(-1, 1, (4, d)), bm_i=rng.uniform(-1, 1, 4),
        wm_o=rng.uniform(-1, 1, (n, 4)), bm_o=rng.uniform(-1, 1, 4),
        wp_i=rng.uniform(-1, 1, (4, d)), bp_i=rng.uniform(-1, 1, 4),
        wp_o=rng.uniform(-1, 1, (n, 4)), bp_o=rng.uniform(-1, 1, 4),
        mag_cap_eps=eps,
    )
    u = rng.uniform(-2, 2, size=(steps, d))
    rows, _, vals, _ = tg.generate_stack(gen, u)
    b = rng.standard_normal((steps, n)) + 1j * rng.standard_normal((steps, n))
    b /= np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), 1.0)
    x0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x0 /= max(np.linalg.norm(x0), 1.0)
    states = scan.scan_states(rows[None], vals[None], b[None], x0[None])[0]
    norms = np.linalg.norm(states, axis=-1)
    assert np.all(norms <= np.sqrt(n) * 1.0 / eps + 1e-9)


def test_uncapped_norms_stay_finite_long_run():
    rng = np.random.default_rng(28)
    cfg = small_config(state=8, vocab=3)
    params = md.init_model(cfg, seed=15)
    tokens = rng.integers(0, 3, size=(1, 100_000))
    logits, _ = md.forward_batch(params, tokens, want_tape=False)
    assert np.all(np.isfinite(logits))
