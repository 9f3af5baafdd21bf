import math
from dataclasses import replace

import numpy as np
import pytest

from fddmoe import diffcore as dc
from fddmoe import endtoend as e2e
from fddmoe.channels import TaskConfig, gen_rayleigh
from fddmoe.diffcore import ComplexMatrix, Tensor, parameter
from fddmoe.endtoend import (PRESETS, ModelBundle, ModelConfig, aggregate, binarize, encode_feedback,
                             forward_end_to_end, input_proj, mhsa_sublayer, moe_ffn_sublayer, output_head,
                             pilot_forward, power_normalize, route, trunk_forward)

TINY = PRESETS["tiny"]


def task(**kw):
    base = dict(task_id="t", n_tx=4, n_users=3, pilot_ratio="1/2", feedback_ratio="1")
    base.update(kw)
    return TaskConfig(**base)


def crand(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def t64(x):
    return parameter(np.asarray(x, np.float64), dtype=np.float64)


# -- pilots ------------------------------------------------------------------


def test_pilot_noiseless_selection(rng):
    with dc.precision("f64"):
        X = t64(rng.standard_normal((2, 4, 3)))
        H = np.zeros((1, 4), complex)
        H[0, 0] = 1
        Y = pilot_forward(H, X, 0.0, energy=2.0).numpy()
        Xn = e2e.normalize_pilot(X, 2.0).numpy()
        np.testing.assert_allclose(Y[0], Xn[0], atol=1e-14)
        np.testing.assert_allclose(np.sum(np.abs(Xn) ** 2, axis=0), 2.0, rtol=1e-12)


def test_pilot_identity_channel_orthonormal_pilot():
    with dc.precision("f64"):
        Es = 3.0
        U = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))[0][:, :2]
        X = t64(np.stack([U, np.zeros_like(U)]))
        Y = pilot_forward(np.eye(4, dtype=complex), X, 0.0, energy=Es).numpy()
        np.testing.assert_allclose(Y, math.sqrt(Es) * U, atol=1e-12)


def test_pilot_noise_statistics(rng):
    with dc.precision("f64"):
        X = t64(rng.standard_normal((2, 4, 2)))
        H = crand(rng, 50_000, 1, 4)
        clean = pilot_forward(H, X, 0.0).numpy()
        noisy = pilot_forward(H, X, 0.1, rng=np.random.default_rng(3)).numpy()
    z = (noisy - clean).ravel()
    assert z.size == 100_000
    assert 0.098 <= np.mean(np.abs(z) ** 2) <= 0.102
    assert np.var(z.real) == pytest.approx(0.05, rel=0.05)


def test_pilot_shape_errors(rng):
    X = parameter(rng.standard_normal((2, 4, 2)))
    with pytest.raises(dc.ShapeError):
        pilot_forward(crand(rng, 2, 5), X, 0.0)
    with pytest.raises(ValueError):
        pilot_forward(crand(rng, 2, 4), X, 0.1)


# -- quantizer and encoder ------------------------------------------------------


def test_binarize_forward_and_mask():
    x = parameter(np.array([0.3, -1.2, 0.0]))
    q = binarize(x)
    np.testing.assert_array_equal(q.data, [1, -1, 1])
    q.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 0, 1])


def test_encoder_codomain_sharing_and_zero_input(rng):
    arch = TINY
    b = ModelBundle.create(arch, [task()], seed=0)
    p = b.task("t").params
    y = crand(rng, 1, 2)
    Y = ComplexMatrix.from_numpy(np.concatenate([y, y, crand(rng, 1, 2)]).astype(np.complex64))
    q = encode_feedback(Y, p).data
    assert q.shape == (3, 4) and set(np.unique(q)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(q[0], q[1])
    zero = {k: parameter(np.zeros_like(v.data)) if k.endswith(".b") else v for k, v in p.items()}
    q0 = encode_feedback(ComplexMatrix.from_numpy(np.zeros((2, 2), np.complex64)), zero).data
    np.testing.assert_array_equal(q0, 1.0)


def test_encoder_width_mismatch(rng):
    b = ModelBundle.create(TINY, [task()], seed=0)
    with pytest.raises(dc.ShapeError):
        encode_feedback(ComplexMatrix.from_numpy(crand(rng, 2, 5).astype(np.complex64)), b.task("t").params)


def test_aggregate():
    qs = [np.array([1.0, -1, 1]), np.array([-1.0, -1, 1])]
    Q = aggregate(qs).data
    np.testing.assert_array_equal(Q[:, 1], qs[1])
    assert aggregate(qs[:1]).shape == (3, 1)
    np.testing.assert_array_equal(aggregate(qs[::-1]).data, Q[:, ::-1])
    with pytest.raises(dc.ShapeError):
        aggregate([np.ones(3), np.ones(2)])


def test_input_proj():
    b = np.array([0.5, -1.0, 2.0])
    params = {"in.w": Tensor(np.zeros((4, 3))), "in.b": Tensor(b)}
    Q = Tensor(np.ones((4, 2)))
    np.testing.assert_array_equal(input_proj(Q, params).data, [b, b])
    assert input_proj(Tensor(np.ones((4, 1))), params).shape == (1, 3)
    params["in.w"] = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    Qr = Tensor(np.random.default_rng(1).standard_normal((4, 3)))
    perm = [2, 0, 1]
    np.testing.assert_allclose(input_proj(Tensor(Qr.data[:, perm]), params).data,
                               input_proj(Qr, params).data[perm])


# -- trunk -----------------------------------------------------------------------


def _trunk(arch, seed=0):
    with dc.precision("f64"):
        return e2e.init_trunk(arch, np.random.default_rng(seed))


def test_mhsa_single_token_is_value_output_chain(rng):
    arch = replace(TINY, dropout=0.0)
    tr = _trunk(arch)
    z = t64(rng.standard_normal((1, 8)))
    out = mhsa_sublayer(z, tr, 0, arch).data
    mha = z.data @ tr["block0.wv"].data @ tr["block0.wo"].data
    want = dc.layer_norm(t64(z.data + mha), tr["block0.ln1.g"], tr["block0.ln1.b"], arch.ln_eps).data
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_mhsa_hand_oracle():
    arch = ModelConfig(d_model=2, n_heads=1, n_experts=1, top_k=1, n_blocks=1, expert_ff=2, dropout=0.0)
    W = {"wq": [[0.5, -0.2], [0.1, 0.3]], "wk": [[0.2, 0.4], [-0.3, 0.1]],
         "wv": [[1.0, 0.5], [-0.5, 0.2]], "wo": [[0.3, -0.1], [0.2, 0.4]]}
    tr = {f"block0.{k}": t64(v) for k, v in W.items()}
    tr["block0.ln1.g"], tr["block0.ln1.b"] = t64([1.0, 1.0]), t64([0.0, 0.0])
    Z = [[1.0, 2.0], [-0.5, 0.7]]
    got = mhsa_sublayer(t64(Z), tr, 0, arch).data

    def mm(A, B):
        return [[sum(A[i][t] * B[t][j] for t in range(len(B))) for j in range(len(B[0]))] for i in range(len(A))]

    q, k, v = mm(Z, W["wq"]), mm(Z, W["wk"]), mm(Z, W["wv"])
    rows = []
    for i in range(2):
        s = [sum(q[i][c] * k[j][c] for c in range(2)) / math.sqrt(2) for j in range(2)]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        a = [x / sum(e) for x in e]
        rows.append([sum(a[j] * v[j][c] for j in range(2)) for c in range(2)])
    o = mm(rows, W["wo"])
    want = []
    for i in range(2):
        r = [Z[i][c] + o[i][c] for c in range(2)]
        mu = sum(r) / 2
        var = sum((x - mu) ** 2 for x in r) / 2
        want.append([(x - mu) / math.sqrt(var + arch.ln_eps) for x in r])
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_route_examples():
    m = route(np.array([[3.0, 1.0, 2.0]]), 2)
    np.testing.assert_array_equal(m, [[True, False, True]])
    g = dc.softmax(Tensor(np.array([[3.0, 1.0, 2.0]], np.float64)), m).data
    np.testing.assert_allclose(g, [[0.7311, 0.0, 0.2689]], atol=5e-5)
    # ties go to the lower index
    np.testing.assert_array_equal(route(np.array([[1.0, 1.0, 1.0]]), 2), [[True, True, False]])
    with pytest.raises(ValueError):
        route(np.zeros((1, 2)), 3)


def test_degenerate_moe_is_plain_ffn(rng):
    arch = ModelConfig(d_model=4, n_heads=1, n_experts=1, top_k=1, n_blocks=1, expert_ff=6, dropout=0.0)
    tr = _trunk(arch)
    z = t64(rng.standard_normal((3, 4)))
    got = moe_ffn_sublayer(z, tr, 0, arch).data
    ffn = e2e.expert_forward(z, tr, 0, 0).data
    want = dc.layer_norm(t64(z.data + ffn), tr["block0.ln2.g"], tr["block0.ln2.b"], arch.ln_eps).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_moe_sparsity_stats(rng):
    arch = replace(PRESETS["desk"], dropout=0.0)
    tr = _trunk(arch)
    stats = {}
    moe_ffn_sublayer(t64(rng.standard_normal((10, 64))), tr, 0, arch, stats=stats)
    g = stats["gates"][0]
    assert np.all((g > 0).sum(axis=1) == arch.top_k)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-6)
    assert stats["expert_counts"][0].sum() == 10 * arch.top_k


def test_unselected_experts_get_zero_grad(rng):
    arch = replace(PRESETS["desk"], dropout=0.0, top_k=1)
    tr = _trunk(arch)
    z = t64(rng.standard_normal((2, 64)))
    logits = z.data @ tr["block0.router.w"].data
    chosen = set(np.argmax(logits, axis=1))
    moe_ffn_sublayer(z, tr, 0, arch).sum().backward()
    for j in range(arch.n_experts):
        g = tr[f"block0.expert{j}.l1.w"].grad
        if j in chosen:
            assert g is not None and np.any(g != 0)
        else:
            assert g is None or np.all(g == 0)


def test_trunk_zero_blocks_identity_and_eval_determinism(rng):
    z = t64(rng.standard_normal((3, 8)))
    arch0 = replace(TINY, n_blocks=0)
    np.testing.assert_array_equal(trunk_forward(z, {}, arch0).data, z.data)
    tr = _trunk(TINY)
    a = trunk_forward(z, tr, TINY, "eval").data
    b = trunk_forward(z, tr, TINY, "eval").data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        trunk_forward(z, tr, TINY, "infer")


def test_trunk_equivariance(rng):
    arch = replace(PRESETS["desk"], dropout=0.0)
    tr = _trunk(arch)
    z = rng.standard_normal((5, 64))
    perm = rng.permutation(5)
    a = trunk_forward(t64(z), tr, arch).data
    b = trunk_forward(t64(z[perm]), tr, arch).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


# -- output and power ----------------------------------------------------------


def test_output_head_layout():
    params = {"out.w": Tensor(np.eye(4)), "out.b": Tensor(np.zeros(4))}
    V = output_head(Tensor(np.array([[1.0, 2, 3, 4]])), params, 2).numpy()
    np.testing.assert_array_equal(V[:, 0], [1 + 3j, 2 + 4j])
    zero = {"out.w": Tensor(np.zeros((3, 4))), "out.b": Tensor(np.zeros(4))}
    assert np.all(output_head(Tensor(np.ones((2, 3))), zero, 2).numpy() == 0)
    with pytest.raises(dc.ShapeError):
        output_head(Tensor(np.ones((2, 3))), zero, 3)


def test_power_normalize_examples(rng):
    with dc.precision("f64"):
        V = ComplexMatrix.from_numpy(np.array([[1.0 + 0j, 0], [0, 0]]))
        np.testing.assert_allclose(power_normalize(V, 4.0).numpy(), 2 * V.numpy())
        V2 = ComplexMatrix.from_numpy(np.array([[2.0 + 0j, 0], [0, 0]]))
        np.testing.assert_allclose(power_normalize(V2, 4.0).numpy(), V2.numpy())
        R = ComplexMatrix.from_numpy(crand(rng, 7, 4, 3))
        n2 = np.sum(np.abs(power_normalize(R, 2.5).numpy()) ** 2, axis=(-2, -1))
        assert np.max(np.abs(n2 / 2.5 - 1)) <= 1e-9
        with pytest.raises(e2e.DegeneratePrecoderError):
            power_normalize(ComplexMatrix.from_numpy(np.zeros((2, 2), complex)), 1.0)


def test_constraint_check_catches_violation(monkeypatch):
    monkeypatch.setattr(e2e, "CHECK_CONSTRAINTS", True)
    with pytest.raises(e2e.ConstraintViolation):
        e2e._check(np.array([1.1]), 1.0, "probe")


# -- full pipeline -------------------------------------------------------------


def test_forward_contract_and_determinism():
    cfg = task()
    b = ModelBundle.create(TINY, [cfg], seed=1)
    H = gen_rayleigh(cfg, 5, seed=0).samples
    V1 = forward_end_to_end(H, b, "t", rng=np.random.default_rng(9)).numpy()
    V2 = forward_end_to_end(H, b, "t", rng=np.random.default_rng(9)).numpy()
    assert V1.shape == (5, 4, 3)
    np.testing.assert_allclose(np.sum(np.abs(V1) ** 2, axis=(1, 2)), cfg.power, rtol=1e-5)
    assert V1.tobytes() == V2.tobytes()
    with pytest.raises(e2e.UnknownTaskError):
        forward_end_to_end(H, b, "missing")
    with pytest.raises(dc.ShapeError):
        forward_end_to_end(H[:, :2], b, "t", rng=np.random.default_rng(0))


def test_forward_equivariance(rng):
    cfg = task(n_users=4)
    b = ModelBundle.create(PRESETS["desk"], [cfg], seed=2)
    H = gen_rayleigh(cfg, 3, seed=1).samples
    noise = e2e.complex_noise((3, 4, cfg.pilot_len), cfg.sigma2, rng)
    perm = np.array([2, 0, 3, 1])
    V = forward_end_to_end(H, b, "t", noise=noise).numpy()
    Vp = forward_end_to_end(H[:, perm], b, "t", noise=noise[:, perm]).numpy()
    assert np.max(np.abs(Vp - V[:, :, perm])) <= 1e-6


def test_dsc_not_equivariant(rng):
    cfg = task(n_users=3)
    b = ModelBundle.create(TINY, [cfg], seed=0, kind="dsc")
    assert b.trunk == {}
    H = gen_rayleigh(cfg, 1, seed=4).samples
    noise = np.zeros((1, 3, cfg.pilot_len), complex)
    V = forward_end_to_end(H, b, "t", noise=noise).numpy()
    assert V.shape == (1, 4, 3)
    found = False
    for seed in range(20):
        H = gen_rayleigh(cfg, 1, seed=seed).samples
        perm = np.array([1, 2, 0])
        V = forward_end_to_end(H, b, "t", noise=noise).numpy()
        Vp = forward_end_to_end(H[:, perm], b, "t", noise=noise).numpy()
        if np.max(np.abs(Vp - V[:, :, perm])) > 1e-4:
            found = True
            break
    assert found


def test_dsc_zero_weights_give_zero_raw_output():
    cfg = task()
    b = ModelBundle.create(TINY, [cfg], seed=0, kind="dsc")
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in b.task("t").params.items() if k.startswith("dsc.")}
    V = e2e.dsc_decoder_forward(Tensor(np.ones((4, 3), np.float32)), p, 4)
    assert V.shape == (4, 3) and np.all(V.numpy() == 0)


def test_cep_forward_shape():
    cfg = task()
    b = ModelBundle.create(TINY, [cfg], seed=0, kind="cep")
    V = forward_end_to_end(gen_rayleigh(cfg, 2, seed=0).samples, b, "t", rng=np.random.default_rng(0))
    assert V.shape == (2, 4, 3)


def test_bundle_parameter_sets_disjoint():
    b = ModelBundle.create(TINY, [task(), task(task_id="u", n_users=2)], seed=0)
    ids = [id(t) for t in b.named_parameters().values()]
    assert len(ids) == len(set(ids))
    with pytest.raises(ValueError):
        b.add_task(task())


def test_end_to_end_gradient_through_quantizer(rng):
    # the straight-through path must deliver nonzero pilot gradients
    cfg = task(n_tx=4, n_users=2, pilot_ratio="1/2", feedback_ratio="1")
    with dc.precision("f64"):
        b = ModelBundle.create(replace(TINY, dropout=0.0), [cfg], seed=3)
        H = gen_rayleigh(cfg, 4, seed=0).samples
        noise = e2e.complex_noise((4, 2, cfg.pilot_len), cfg.sigma2, rng)
        from fddmoe.objectives import task_loss
        loss = task_loss(ComplexMatrix.from_numpy(H.astype(complex)),
                         forward_end_to_end(H, b, "t", noise=noise), cfg.sigma2)
        loss.backward()
    assert np.any(b.task("t").params["pilot"].grad != 0)
