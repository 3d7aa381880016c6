import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from fkge.bus import Message, MessageKind, SessionChannel, scan_for_rows
from fkge.kge import TrainConfig, init_embeddings
from fkge.ppat import (ClientView, Discriminator, HostView, PpatConfig, build_virtual_bundle,
                       client_view, csls_pairs, generate, generator_grad_message, generator_objective,
                       host_view, new_session, partition, procrustes, random_orthogonal,
                       resolve_virtual_triples, run_session, student_objective, teacher_objective,
                       weight_gradient)

D = 6


@pytest.fixture
def disc():
    return Discriminator.create(D, 5, np.random.default_rng(0))


def _rows(n, seed=1):
    return np.random.default_rng(seed).normal(size=(n, D))


class TestGradients:
    def test_discriminator_backward(self, disc):
        x = _rows(7)
        w = np.random.default_rng(2).normal(size=7)
        grads, dx = disc.backward(disc.forward(x)[1], w)
        for name, p in disc.params().items():
            num = numeric_grad(lambda: float(w @ disc.forward(x)[0]), p)
            assert rel_error(grads[name], num) < 1e-5
        assert rel_error(dx, numeric_grad(lambda: float(w @ disc.forward(x)[0]), x)) < 1e-5

    def test_generator_objective(self, disc):
        fake = _rows(9)
        _, dx = generator_objective(disc, fake)
        num = numeric_grad(lambda: generator_objective(disc, fake)[0], fake)
        assert rel_error(dx, num) < 1e-5

    def test_teacher_objective(self, disc):
        fake, real = _rows(5, 3), _rows(8, 4)
        _, grads = teacher_objective(disc, fake, real)
        for name, p in disc.params().items():
            num = numeric_grad(lambda: teacher_objective(disc, fake, real)[0], p)
            assert rel_error(grads[name], num) < 1e-5

    def test_student_objective(self, disc):
        fake = _rows(10, 5)
        labels = np.random.default_rng(6).integers(0, 2, 10)
        _, grads = student_objective(disc, fake, labels)
        for name, p in disc.params().items():
            num = numeric_grad(lambda: -student_objective(disc, fake, labels)[0], p)
            assert rel_error(grads[name], num) < 1e-5

    def test_weight_gradient_from_host_matrix(self, disc):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(12, D))
        W = random_orthogonal(D, rng) + 0.1 * rng.normal(size=(D, D))
        _, delta = generator_objective(disc, X @ W.T)
        A = delta.T @ (X @ W.T)
        num = numeric_grad(lambda: generator_objective(disc, X @ W.T)[0], W)
        assert rel_error(weight_gradient(W, A), num) < 1e-5

    def test_grad_message_is_square(self, disc):
        s = new_session("c", "h", D, 10, seed=0)
        loss, A = generator_grad_message(s, _rows(32))
        assert A.shape == (D, D) and np.isfinite(loss)


def test_objective_values_by_hand():
    # zero network: every probability is 1/2
    z = Discriminator(np.zeros((2, D)), np.zeros(2), np.zeros(2), np.zeros(1))
    fake, real = _rows(3), _rows(4)
    assert generator_objective(z, fake)[0] == pytest.approx(np.log(0.5))
    assert teacher_objective(z, fake, real)[0] == pytest.approx(-7 * np.log(0.5))
    assert student_objective(z, fake, np.array([1, 0, 1]))[0] == pytest.approx(np.log(0.5))


def test_clamped_gradient_is_zero():
    d = Discriminator(np.zeros((1, D)), np.zeros(1), np.zeros(1), np.array([40.0]))
    val, dx = generator_objective(d, _rows(2))
    assert val == pytest.approx(np.log(1e-7))
    assert not dx.any()


def test_generate_oracle():
    s = new_session("c", "h", D, 10, seed=3)
    x = _rows(4)
    np.testing.assert_allclose(generate(s, x), np.array([s.W @ row for row in x]), atol=1e-14)
    with pytest.raises(ValueError):
        generate(s, np.zeros((2, D + 1)))


@pytest.mark.parametrize("n, parts", [(10, 4), (3, 3), (100, 7)])
def test_partition_disjoint_exhaustive(n, parts):
    ps = partition(n, parts, np.random.default_rng(0))
    assert len(ps) == parts
    flat = np.concatenate(ps)
    assert sorted(flat.tolist()) == list(range(n))
    assert max(map(len, ps)) - min(map(len, ps)) <= 1


def test_few_aligned_items_shrink_teacher_count(caplog):
    s = new_session("c", "h", D, 2, PpatConfig(teachers=4), seed=0)
    assert len(s.teachers) == 2
    assert "teachers" in caplog.text
    with pytest.raises(ValueError):
        new_session("c", "h", D, 0)


def test_procrustes_and_csls_recover_rotation():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, D))
    R = random_orthogonal(D, rng)
    Y = X @ R.T
    np.testing.assert_allclose(procrustes(X, Y), R, atol=1e-10)
    pairs = csls_pairs(X @ R.T, Y, k=5)
    assert np.array_equal(pairs[:, 0], pairs[:, 1]) and len(pairs) == 40


@pytest.mark.parametrize("bad", [{"teachers": 0}, {"momentum": 1.0}, {"w_init": "zeros"},
                                 {"refine": "icp"}, {"orthogonalize": 0.7}, {"patience": 0}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        PpatConfig(**bad)


def _views(seed=0, n=64, d=D):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    R = random_orthogonal(d, rng)
    Y = X @ R.T
    return ClientView("c", X, n), HostView("h", Y, np.arange(n), np.zeros(0, np.int64), n, 0)


class TestSession:
    def test_rotation_recovered_and_labels_counted(self):
        cv, hv = _views()
        s = new_session("c", "h", D, 64, seed=0)
        ch = SessionChannel()
        b = run_session(s, cv, hv, ch)
        cos = (b.entity_rows * hv.rows).sum(1) / np.linalg.norm(b.entity_rows, axis=1) / np.linalg.norm(hv.rows, axis=1)
        assert cos.mean() > 0.99
        assert s.labels_issued == s.ledger.query_count > 0
        assert b.epsilon == s.ledger.epsilon()
        assert not scan_for_rows([_as_msg(e) for e in ch.outbox], cv.rows)

    def test_converged_start_skips_training(self):
        cv, _ = _views()
        hv = HostView("h", cv.rows.copy(), np.arange(64), np.zeros(0, np.int64), 64, 0)
        s = new_session("c", "h", D, 64, PpatConfig(w_init="identity"), seed=0)
        b = run_session(s, cv, hv)
        assert b.converged and s.epochs == 0 and s.labels_issued == 0
        np.testing.assert_array_equal(b.entity_rows, cv.rows)

    def test_seeded(self):
        cv, hv = _views()
        a = run_session(new_session("c", "h", D, 64, seed=5), cv, hv)
        b = run_session(new_session("c", "h", D, 64, seed=5), cv, hv)
        assert np.array_equal(a.entity_rows, b.entity_rows)

    def test_misaligned_views(self):
        cv, hv = _views()
        hv.rows = hv.rows[:10]
        with pytest.raises(ValueError, match="line up"):
            run_session(new_session("c", "h", D, 64, seed=0), cv, hv)

    def test_per_batch_traffic_bound(self):
        d = 100
        cv, hv = _views(1, n=64, d=d)
        ch = SessionChannel()
        run_session(new_session("c", "h", d, 64, PpatConfig(max_epochs=1, refine="none"), seed=0), cv, hv, ch)
        adv = [e for e in ch.outbox if e.kind is MessageKind.ADV_BATCH and "phase" not in e.meta]
        grad = [e for e in ch.outbox if e.kind is MessageKind.GRAD_BATCH]
        assert len(adv) == len(grad) == 2
        per_batch_bits = 8 * (len(adv[0].payload) + len(grad[0].payload))
        assert per_batch_bits == 8 * (32 * d * 8 + d * d * 8)
        assert per_batch_bits / 1e6 <= 0.845


def _as_msg(env):
    return Message(0, env.kind, env.src, env.dst, env.payload, env.meta)


class TestVirtualBundle:
    @pytest.fixture
    def setup(self, small_federation):
        graphs, aligns = small_federation
        by_id = {g.graph_id: g for g in graphs}
        al = aligns[0]
        c, h = by_id[al.pair[0]], by_id[al.pair[1]]
        tc = init_embeddings(c, TrainConfig(dim=D, seed=0))
        th = init_embeddings(h, TrainConfig(dim=D, seed=1))
        return c, h, tc, th, al

    def test_counts_and_resolution(self, setup):
        c, h, tc, th, al = setup
        cv, hv = client_view(c, tc, al), host_view(h, th, al)
        s = new_session(c.graph_id, h.graph_id, D, len(hv.rows), seed=0)
        ext = build_virtual_bundle(s, cv.contexts, tc, cv.aligned_relations)
        adjacent = set()
        joining = set()
        aligned_rel = set(cv.aligned_relations.tolist())
        for ctx in cv.contexts:
            adjacent.update(ctx.adjacent.tolist())
            joining.update(r for r in ctx.relations.tolist() if r not in aligned_rel)
        assert len(ext.entity_rows) == len(adjacent)
        assert len(ext.relation_rows) == len(joining)
        assert len(ext.triples) == sum(len(x) for x in cv.contexts)
        resolved = resolve_virtual_triples(ext.triples, hv)
        ent_ids = set(hv.entity_ids.tolist())
        for (ci, code, v, head), (hh, r, tt) in zip(ext.triples, resolved):
            center, vent = (hh, tt) if head else (tt, hh)
            assert center in ent_ids and center == hv.entity_ids[ci]
            assert vent == h.n_entities + v
            assert r == (h.n_relations + code if code >= 0 else hv.relation_ids[-code - 1])

    def test_bundle_translates_client_rows(self, setup):
        c, h, tc, th, al = setup
        cv, hv = client_view(c, tc, al), host_view(h, th, al)
        s = new_session(c.graph_id, h.graph_id, D, len(hv.rows), PpatConfig(max_epochs=2), seed=0)
        b = run_session(s, cv, hv)
        np.testing.assert_allclose(b.entity_rows, generate(s, cv.rows[:cv.n_entity_rows]), atol=1e-14)
        assert len(b.virtual_triples) > 0
        e_labels, r_labels = b.virtual_labels()
        assert len(e_labels) == len(b.virtual_entity_rows)

    def test_simple_mode_has_no_virtual_payload(self, setup):
        c, h, tc, th, al = setup
        cv, hv = client_view(c, tc, al), host_view(h, th, al)
        s = new_session(c.graph_id, h.graph_id, D, len(hv.rows), PpatConfig(max_epochs=1, simple=True), seed=0)
        ch = SessionChannel()
        b = run_session(s, cv, hv, ch)
        assert len(b.virtual_entity_rows) == len(b.virtual_triples) == 0
        bundle = [e for e in ch.outbox if e.kind is MessageKind.TRANSLATED_BUNDLE][0]
        assert bundle.meta["virtual_entities"] == 0 and bundle.meta["rows"] == len(cv.rows)
