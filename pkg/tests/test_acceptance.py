"""End-to-end acceptance checks, one test per shipped guarantee.

Each test registers a PASS/FAIL line printed in the terminal summary. The
trend checks (5-7) train the full 700-step probe over frozen synthetic
worlds, so this file dominates suite runtime.
"""

import time
from contextlib import contextmanager

import numpy as np
import pytest

from segtta.adapter import (
    AdamState,
    AdapterModel,
    Gradients,
    TrainConfig,
    adam_step,
    fused_support_loss,
    pseudo_label_loss,
    pseudo_visual_class_features,
    total_loss,
    train_adapter,
    visual_support_loss,
)
from segtta.cli import main
from segtta.fileio import (
    load_store,
    read_mask_array,
    read_tensor,
    save_store,
    write_mask,
    write_tensor,
)
from segtta.harness import (
    SynthConfig,
    build_store,
    evaluate_queries,
    evaluate_zero_shot,
    generate_world,
    select_support,
)
from segtta.inference import RegionSet, region_pool, segment
from segtta.numerics import IGNORE_INDEX, LabelMask, softmax
from segtta.retrieval import class_relevance_weights, knn, retrieve_for_image
from segtta.support import (
    SupportStore,
    add_support_image,
    aggregate_class_feature,
    attach_text,
    pool_image_class_features,
    substitute_missing_text,
)

from conftest import (
    feature_map,
    make_bank,
    random_store,
    record_criterion,
    unit_rows,
)
from oracles import (
    fd_gradients,
    knn_fullsort,
    max_relative_error,
    pool_classes_loop,
    pseudo_features_loop,
    region_pool_loop,
    softmax_direct,
)


@contextmanager
def criterion(num: int, name: str):
    try:
        yield
    except BaseException:
        record_criterion(num, name, False)
        raise
    record_criterion(num, name, True)


def random_instance(rng):
    """One small loss instance: model plus the three item groups."""
    C = int(rng.integers(2, 6))
    d = int(rng.integers(2, 9))
    model = AdapterModel(0.5 * rng.standard_normal((C, d)),
                         0.5 * rng.standard_normal(C))

    def group(m):
        return (unit_rows(rng, m, d), rng.integers(0, C, size=m),
                rng.random(m) + 0.05)

    mv, mf, mp = (int(rng.integers(1, 21)) for _ in range(3))
    vx, vy, vw = group(mv)
    fx, fy, fw = group(mf)
    px = unit_rows(rng, mp, d)
    pt = softmax(rng.standard_normal((mp, C)), 1.0)
    pw = rng.random(mp) + 0.05
    return model, (vx, vy, vw), (fx, fy, fw), (px, pt, pw), C, d


def test_criterion_1_gradient_correctness():
    with criterion(1, "analytic gradients match finite differences"):
        rng = np.random.default_rng(101)
        start = time.perf_counter()
        for _ in range(50):
            model, (vx, vy, vw), (fx, fy, fw), (px, pt, pw), C, d = \
                random_instance(rng)

            checks = [
                (lambda w, b: visual_support_loss(AdapterModel(w, b), vx, vy, vw),
                 visual_support_loss(model, vx, vy, vw)[1]),
                (lambda w, b: fused_support_loss(AdapterModel(w, b), fx, fy, fw),
                 fused_support_loss(model, fx, fy, fw)[1]),
                (lambda w, b: pseudo_label_loss(AdapterModel(w, b), px, pt, pw),
                 pseudo_label_loss(model, px, pt, pw)[1]),
            ]
            for loss_fn, grads in checks:
                dw, db = fd_gradients(lambda w, b: loss_fn(w, b)[0],
                                      model.weights, model.bias)
                assert max_relative_error(grads.weights, dw) < 1e-4
                assert max_relative_error(grads.bias, db) < 1e-4

            from segtta.adapter import TrainingBatch
            batch = TrainingBatch(vx, vy, vw, fx, fy, fw, px, pt, pw, C)
            cfg = TrainConfig()
            _, _, grads = total_loss(model, batch, cfg)
            dw, db = fd_gradients(
                lambda w, b: total_loss(AdapterModel(w, b), batch, cfg)[0],
                model.weights, model.bias)
            assert max_relative_error(grads.weights, dw) < 1e-4
            assert max_relative_error(grads.bias, db) < 1e-4
        assert time.perf_counter() - start < 10.0


def test_criterion_2_oracle_equivalences():
    with criterion(2, "vectorized paths match loop oracles"):
        rng = np.random.default_rng(202)
        start = time.perf_counter()

        # nearest neighbors over 256 stored vectors
        C, d = 8, 16
        store = SupportStore.empty(C, d)
        for i in range(256):
            x = feature_map(unit_rows(rng, 1, d), 1, 1)
            mask = LabelMask(np.full((4, 4), i % C, dtype=np.int64), C)
            add_support_image(store, x, mask, i)
        vectors = [e.vector.astype(np.float64) for e in store.entries]
        ids = [e.entry_id for e in store.entries]
        for k in (1, 4, 16):
            for _ in range(5):
                q = unit_rows(rng, 1, d)[0]
                got = [e.entry_id for e in knn(q, store, k)]
                assert got == knn_fullsort(q, vectors, ids, k)

        # per-image class pooling
        x = feature_map(unit_rows(rng, 32, d), 4, 8)
        raw = rng.random((32, C)) * (rng.random((32, C)) < 0.4)
        cols = raw.sum(axis=0)
        raw[:, cols > 0] /= cols[cols > 0]
        from segtta.numerics import PatchLabelMatrix
        got = pool_image_class_features(x, PatchLabelMatrix(raw, 4, 8))
        want = pool_classes_loop(x.data, raw)
        assert [c for c, _ in got] == sorted(want)
        assert all(np.abs(v - want[c]).max() <= 1e-6 for c, v in got)

        # class aggregation: normalized sum over each class's entries
        for c in range(C):
            members = [e.vector.astype(np.float64) for e in store.entries
                       if e.class_id == c]
            s = np.zeros(d)
            for v in members:
                s += v
            s /= np.linalg.norm(s)
            assert np.abs(aggregate_class_feature(store, c) - s).max() <= 1e-6

        # relevance weights: softmax of mean-feature text scores
        bank = make_bank(rng, C, d)
        xq = feature_map(unit_rows(rng, 16, d), 4, 4)
        w = class_relevance_weights(xq, bank, 0.1)
        mean = np.zeros(d)
        for row in xq.data:
            mean += row
        mean /= 16
        scores = np.array([float(t @ mean) for t in
                           bank.features.astype(np.float64)])
        assert np.abs(w - softmax_direct(scores, 0.1)).max() <= 1e-6

        # pseudo pooling
        got = pseudo_visual_class_features(xq, bank, 0.1, set(range(C)))
        want = pseudo_features_loop(xq.data, bank.features.astype(np.float64),
                                    range(C))
        assert [c for c, _ in got] == [c for c, _ in want]
        for (_, a), (_, b) in zip(got, want):
            assert np.abs(a - b).max() <= 1e-6

        # region pooling
        xr = feature_map(unit_rows(rng, 12, d), 3, 4, cell_pixels=5)
        assign = rng.integers(0, 4, size=(15, 20)).astype(np.int64)
        assign[0, :4] = [0, 1, 2, 3]
        pooled = region_pool(xr, RegionSet(assign, 4))
        assert np.abs(pooled - region_pool_loop(xr.data, assign, 3, 4, 4)).max() <= 1e-6

        # softmax itself
        for _ in range(20):
            v = rng.standard_normal(int(rng.integers(2, 9)))
            tau = float(rng.uniform(0.05, 5.0))
            assert np.abs(softmax(v, tau) - softmax_direct(v, tau)).max() <= 1e-6

        assert time.perf_counter() - start < 5.0


def test_criterion_3_zero_shot_fallback_exactness(tmp_path):
    with criterion(3, "empty store segments exactly as zero-shot"):
        root = tmp_path / "world"
        assert main(["synth", "--out", str(root), "--seed", "5", "--classes", "4",
                     "--dim", "12", "--grid", "4", "--queries", "10",
                     "--images-per-class", "1"]) == 0
        empty = tmp_path / "empty.rnss"
        save_store(SupportStore.empty(4, 12), empty)
        for i in range(10):
            a = tmp_path / f"seg_{i}.rnsm"
            b = tmp_path / f"zs_{i}.rnsm"
            assert main(["segment", "--store", str(empty), "--manifest",
                         str(root / "manifest.json"), "--query", str(i),
                         "--out", str(a)]) == 0
            assert main(["zero-shot", "--manifest", str(root / "manifest.json"),
                         "--query", str(i), "--out", str(b)]) == 0
            assert a.read_bytes() == b.read_bytes()


def test_criterion_4_full_support_objective_reduction():
    with criterion(4, "no missing classes: loss is visual + beta_f * fused"):
        rng = np.random.default_rng(404)
        C, d = 5, 12
        bank = make_bank(rng, C, d)
        store = random_store(rng, C, d, images=10, grid=3, bank=bank)
        x = feature_map(unit_rows(rng, 9, d), 3, 3)
        cfg = TrainConfig(steps=120)
        hist = []
        model = train_adapter(store, x, bank, unsupported=(), config=cfg,
                              history=hist)
        assert model is not None and len(hist) == cfg.steps
        for rec in hist:
            assert rec.pseudo == 0.0
            assert abs(rec.total - (rec.visual + cfg.beta_f * rec.fused)) <= 1e-9

        # replaying the run without any pseudo term reproduces the model bit
        # for bit, so the third loss is provably absent rather than just small
        from segtta.adapter import assemble_batch
        retrieved = retrieve_for_image(x, store, cfg.k)
        weights = class_relevance_weights(x, bank, cfg.tau)
        batch = assemble_batch(store, retrieved, weights, [], bank, cfg)
        manual = AdapterModel.zeros(C, d)
        state = AdamState.zeros(C, d)
        for s in range(cfg.steps):
            lv, gv = visual_support_loss(manual, batch.visual_x, batch.visual_y,
                                         batch.visual_w)
            lf, gf = fused_support_loss(manual, batch.fused_x, batch.fused_y,
                                        batch.fused_w)
            grads = Gradients(gv.weights + cfg.beta_f * gf.weights,
                              gv.bias + cfg.beta_f * gf.bias)
            adam_step(manual, grads, state, cfg, s)
        assert manual.weights.tobytes() == model.weights.tobytes()
        assert manual.bias.tobytes() == model.bias.tobytes()


def improvement_world(seed, **kw):
    base = dict(seed=seed, num_classes=10, dim=16,
                cluster_separation=np.pi / 4, feature_noise=0.15,
                text_misalignment=0.3, images_per_class=3, query_images=8)
    base.update(kw)
    return generate_world(SynthConfig(**base))


def test_criterion_5_synthetic_improvement():
    with criterion(5, "adaptation beats zero-shot on 18 of 20 worlds"):
        cfg = TrainConfig()
        wins = 0
        for seed in range(20):
            world = improvement_world(seed)
            bank = substitute_missing_text(world.bank)
            store = build_store(select_support(world, 3), 10, 16,
                                cfg.lambdas, bank=bank)
            adapted = evaluate_queries(world, store, bank, config=cfg)
            zero_shot = evaluate_zero_shot(world, bank, cfg.tau)
            wins += int(adapted > zero_shot)
        assert wins >= 18, f"adapted won on only {wins}/20 seeds"


def test_criterion_6_support_size_trend():
    with criterion(6, "mean mIoU non-decreasing in support size"):
        cfg = TrainConfig()
        budgets = (1, 2, 5, 10)
        totals = np.zeros(len(budgets))
        for seed in range(20):
            world = improvement_world(seed, images_per_class=10)
            bank = substitute_missing_text(world.bank)
            for i, b in enumerate(budgets):
                store = build_store(select_support(world, b), 10, 16,
                                    cfg.lambdas, bank=bank)
                totals[i] += evaluate_queries(world, store, bank, config=cfg)
        means = totals / 20
        for i in range(len(budgets) - 1):
            assert means[i + 1] >= means[i] - 0.005, (
                f"mean mIoU dropped from {means[i]:.4f} (B={budgets[i]}) to "
                f"{means[i + 1]:.4f} (B={budgets[i + 1]})")


def test_criterion_7_partial_support_degradation():
    with criterion(7, "graceful decline without visual support; "
                      "pseudo loss never hurts"):
        cfg_with = TrainConfig()
        cfg_without = TrainConfig(beta_p=0.0)
        fractions = (0.0, 0.3, 0.6, 0.9)
        sum_with = np.zeros(len(fractions))
        sum_without = np.zeros(len(fractions))
        for seed in range(20):
            world = improvement_world(seed, text_misalignment=0.7)
            bank = substitute_missing_text(world.bank)
            samples = select_support(world, 3)
            for i, frac in enumerate(fractions):
                dropped = set(world.visual_drop_order[: round(frac * 10)])
                store = build_store(samples, 10, 16, cfg_with.lambdas,
                                    bank=bank, excluded_classes=dropped)
                sum_with[i] += evaluate_queries(world, store, bank, dropped,
                                                cfg_with)
                sum_without[i] += evaluate_queries(world, store, bank, dropped,
                                                   cfg_without)
        mean_with = sum_with / 20
        mean_without = sum_without / 20
        assert mean_with[0] > mean_with[-1], "no overall decline"
        for i in range(len(fractions) - 1):
            assert mean_with[i + 1] <= mean_with[i] + 0.005, (
                f"mean mIoU rose from {mean_with[i]:.4f} to "
                f"{mean_with[i + 1]:.4f} at fraction {fractions[i + 1]}")
        for i, frac in enumerate(fractions):
            assert mean_with[i] >= mean_without[i] - 1e-9, (
                f"pseudo loss hurt at fraction {frac}: "
                f"{mean_with[i]:.4f} < {mean_without[i]:.4f}")


def test_criterion_8_determinism(tmp_path):
    with criterion(8, "repeated segment runs are byte-identical"):
        root = tmp_path / "world"
        assert main(["synth", "--out", str(root), "--seed", "8", "--classes", "4",
                     "--dim", "12", "--grid", "4", "--queries", "1",
                     "--images-per-class", "2"]) == 0
        store = tmp_path / "s.rnss"
        assert main(["build-support", "--manifest", str(root / "manifest.json"),
                     "--out", str(store)]) == 0
        outs = []
        for run in range(2):
            out = tmp_path / f"run{run}.rnsm"
            assert main(["segment", "--store", str(store), "--manifest",
                         str(root / "manifest.json"), "--query", "0",
                         "--out", str(out), "--seed", "12345"]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


def aggregates_match(a: SupportStore, b: SupportStore, tol: float) -> bool:
    """Order-free equality: same entry contents, same per-class state."""
    key = lambda e: (e.class_id, e.image_id, e.vector.tobytes())
    if sorted(map(key, a.entries)) != sorted(map(key, b.entries)):
        return False
    if not np.array_equal(a.class_counts, b.class_counts):
        return False
    if np.abs(a.class_accumulators.astype(np.float64)
              - b.class_accumulators.astype(np.float64)).max() > tol:
        return False
    if set(a.fused) != set(b.fused):
        return False
    return all(np.abs(a.fused[c].astype(np.float64)
                      - b.fused[c].astype(np.float64)).max() <= tol
               for c in a.fused)


def test_criterion_9_dynamic_expansion_consistency():
    with criterion(9, "insertion order does not change aggregates or labels"):
        rng = np.random.default_rng(909)
        cfg = TrainConfig()
        world = improvement_world(3, num_classes=4, query_images=3)
        bank = substitute_missing_text(world.bank)
        samples = list(world.support)

        def assemble(ordering):
            store = SupportStore.empty(4, 16, cfg.lambdas)
            for idx in ordering:
                s = samples[idx]
                add_support_image(store, s.features, s.mask, s.image_id)
            attach_text(store, bank)
            return store

        batch = assemble(range(len(samples)))
        for _ in range(3):
            shuffled = assemble(rng.permutation(len(samples)))
            assert aggregates_match(batch, shuffled, tol=1e-6)
            for q in world.queries:
                a = segment(batch, q.features, bank, config=cfg)
                b = segment(shuffled, q.features, bank, config=cfg)
                assert np.array_equal(a.full_res_labels.data,
                                      b.full_res_labels.data)


def test_criterion_10_runtime_budget():
    with criterion(10, "one 700-step adaptation stays under two seconds"):
        rng = np.random.default_rng(1010)
        C, d = 30, 64
        bank = make_bank(rng, C, d)
        store = SupportStore.empty(C, d)
        for i in range(180):
            x = feature_map(unit_rows(rng, 4, d), 2, 2)
            mask = LabelMask(np.full((8, 8), i % C, dtype=np.int64), C)
            add_support_image(store, x, mask, i)
        attach_text(store, bank)
        x = feature_map(unit_rows(rng, 64, d), 8, 8)

        cfg = TrainConfig()  # 700 steps
        start = time.perf_counter()
        model = train_adapter(store, x, bank, config=cfg)
        elapsed = time.perf_counter() - start
        assert model is not None
        # item count stays within the budgeted scale
        retrieved = retrieve_for_image(x, store, cfg.k)
        n_items = len(retrieved) + len(retrieved.classes) * len(cfg.lambdas)
        assert n_items <= 500
        assert elapsed < 2.0, f"700 steps took {elapsed:.3f}s"


def test_criterion_11_io_round_trips(tmp_path):
    with criterion(11, "write-read-write is byte stable for all formats"):
        rng = np.random.default_rng(1111)
        for i in range(20):
            # tensors
            shape = tuple(int(rng.integers(1, 6))
                          for _ in range(int(rng.integers(1, 4))))
            arr = rng.standard_normal(shape).astype(np.float32)
            t1, t2 = tmp_path / f"t{i}a", tmp_path / f"t{i}b"
            write_tensor(t1, arr)
            write_tensor(t2, read_tensor(t1))
            assert t1.read_bytes() == t2.read_bytes()

            # masks
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            grid = rng.integers(0, 6, size=(h, w)).astype(np.int64)
            grid[rng.random((h, w)) < 0.2] = IGNORE_INDEX
            m1, m2 = tmp_path / f"m{i}a", tmp_path / f"m{i}b"
            write_mask(m1, grid)
            write_mask(m2, read_mask_array(m1))
            assert m1.read_bytes() == m2.read_bytes()

            # stores
            C = int(rng.integers(1, 5))
            images = int(rng.integers(0, 7))
            lambdas = tuple(sorted({float(round(v, 2)) for v in
                                    rng.random(int(rng.integers(1, 4)))},
                                   reverse=True))
            store = random_store(rng, C, int(rng.integers(2, 7)),
                                 images=images, grid=2, lambdas=lambdas)
            s1, s2 = tmp_path / f"s{i}a", tmp_path / f"s{i}b"
            save_store(store, s1)
            save_store(load_store(s1), s2)
            assert s1.read_bytes() == s2.read_bytes()
