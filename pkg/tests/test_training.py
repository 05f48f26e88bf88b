"""Training loop machinery: losses, config files, candidate records.

Loss oracles are hand-computed from the printed formulas; diversity is
checked against an explicit O(n^2) pair loop written independently here.
"""
import hashlib
import json
import math

import numpy as np
import pytest

from phantasmagoria import networks, stimulus, training
from phantasmagoria.dataset import (store_from_images,
                                    synthesize_texture_corpus)
from phantasmagoria.illusion import PqConfig
from phantasmagoria.stimulus import TargetSpec
from phantasmagoria.training import (CandidateRecord, TrainingConfig,
                                     batch_diversity, bce_loss_and_grad,
                                     export_candidates, finetune,
                                     generator_loss, load_records,
                                     parse_config_file, pretrain_gan,
                                     read_config_overrides, save_records,
                                     select_candidates, write_config_file)


def tiny_generator(channels=1, seed=3):
    """Full 32x32 output (composite needs it) but skeletal widths."""
    return networks.init_generator(
        channels, latent_dim=8, fc1_units=12, base_shape=(8, 8, 6),
        conv1_channels=5, rng=np.random.default_rng(seed), dtype=np.float64)


def tiny_discriminator(channels=1, seed=4):
    return networks.init_discriminator(
        channels, input_size=32, conv_channels=(4, 5, 6), fc1_units=7,
        rng=np.random.default_rng(seed), dtype=np.float64)


def tiny_store(n=8, channels=1, seed=5):
    imgs = synthesize_texture_corpus(n=n, size=64, seed=seed)
    return store_from_images(imgs, source="textures", channels=channels,
                             seed=seed)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

class TestTrainingConfig:
    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            TrainingConfig(alpha=-0.1)

    def test_both_weights_zero_rejected(self):
        with pytest.raises(ValueError):
            TrainingConfig(alpha=0.0, beta=0.0)

    def test_single_zero_weight_allowed(self):
        assert TrainingConfig(beta=0.0).beta == 0.0
        assert TrainingConfig(alpha=0.0).alpha == 0.0

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            TrainingConfig(batch_size=1)


class TestConfigFile:
    def test_round_trip_preserves_every_field(self, tmp_path):
        config = TrainingConfig(
            alpha=0.5, beta=2.0, batch_size=4, max_epochs=7,
            lr_generator=3e-5, lr_discriminator=1e-4, tau=0.2,
            pretrain_epochs=3, seed=42, stop_window=5, stop_tolerance=0.02,
            max_iterations=None, record_every=10, allow_unpretrained=True)
        path = tmp_path / "run.cfg"
        write_config_file(path, config)
        assert parse_config_file(path) == config

    def test_round_trip_with_iteration_cap(self, tmp_path):
        config = TrainingConfig(max_iterations=123)
        path = tmp_path / "run.cfg"
        write_config_file(path, config)
        loaded = parse_config_file(path)
        assert loaded.max_iterations == 123
        assert isinstance(loaded.max_iterations, int)

    def test_overrides_only_contain_listed_keys(self, tmp_path):
        path = tmp_path / "partial.cfg"
        path.write_text("# comment\n\ntau = 0.3\nbatch_size = 16\n")
        assert read_config_overrides(path) == {"tau": 0.3, "batch_size": 16}

    def test_unknown_key_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("tau = 0.3\ngamma = 1\n")
        with pytest.raises(ValueError, match="2: unknown key 'gamma'"):
            read_config_overrides(path)

    def test_missing_equals_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("tau 0.3\n")
        with pytest.raises(ValueError, match="expected 'key = value'"):
            read_config_overrides(path)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

class TestBceLoss:
    def test_matches_hand_computed_values(self):
        p = np.array([0.9, 0.2])
        y = np.array([1.0, 0.0])
        loss, grad = bce_loss_and_grad(p, y)
        assert loss == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2,
                                     abs=1e-15)
        assert grad[0] == pytest.approx((0.9 - 1.0) / (0.9 * 0.1) / 2,
                                        abs=1e-15)
        assert grad[1] == pytest.approx(0.2 / (0.2 * 0.8) / 2, abs=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, size=6)
        y = (rng.random(6) > 0.5).astype(float)
        _, grad = bce_loss_and_grad(p, y)
        eps = 1e-7
        for i in range(len(p)):
            hi, lo = p.copy(), p.copy()
            hi[i] += eps
            lo[i] -= eps
            fd = (bce_loss_and_grad(hi, y)[0]
                  - bce_loss_and_grad(lo, y)[0]) / (2 * eps)
            assert grad[i] == pytest.approx(fd, rel=1e-5)

    def test_saturated_probabilities_stay_finite(self):
        loss, grad = bce_loss_and_grad(np.array([0.0, 1.0]),
                                       np.array([1.0, 0.0]))
        assert np.isfinite(loss)
        assert np.all(np.isfinite(grad))


class TestGeneratorLoss:
    def test_matches_hand_computed_value(self):
        config = TrainingConfig(alpha=2.0, beta=3.0, tau=0.15)
        # shortfalls: (0.15-0.05)=0.1 and 0 (pq above tau is clamped)
        # id term: (0.01 + 0)/2 = 0.005 ; bd term: (0.16+0.04)/2 = 0.1
        loss = generator_loss([0.05, 0.2], [0.6, 0.8], config)
        assert loss == pytest.approx(2.0 * 0.005 + 3.0 * 0.1, abs=1e-15)

    def test_scalar_pq_accepted(self):
        config = TrainingConfig(alpha=1.0, beta=0.0, tau=0.15)
        assert generator_loss(0.05, [0.5], config) == pytest.approx(
            0.1 ** 2, abs=1e-15)

    def test_overshoot_not_penalized(self):
        config = TrainingConfig(alpha=1.0, beta=0.0, tau=0.15)
        assert generator_loss([0.5], [0.5], config) == 0.0

    def test_non_finite_input_raises(self):
        config = TrainingConfig()
        with pytest.raises(FloatingPointError):
            generator_loss([np.nan], [0.5], config)
        with pytest.raises(FloatingPointError):
            generator_loss([0.1], [np.inf], config)


class TestBatchDiversity:
    def test_matches_explicit_pair_loop(self):
        rng = np.random.default_rng(1)
        batch = rng.random((5, 4, 4))
        pairs = []
        for i in range(5):
            for j in range(i + 1, 5):
                pairs.append(np.sqrt(np.mean((batch[i] - batch[j]) ** 2)))
        assert batch_diversity(batch) == pytest.approx(np.mean(pairs),
                                                       abs=1e-12)

    def test_identical_images_score_zero(self):
        batch = np.ones((4, 3, 3)) * 0.7
        assert batch_diversity(batch) == 0.0

    def test_constant_offset_pair(self):
        a = np.zeros((2, 8, 8))
        a[1] += 0.25
        assert batch_diversity(a) == pytest.approx(0.25, abs=1e-15)

    def test_single_image_rejected(self):
        with pytest.raises(ValueError, match="at least two"):
            batch_diversity(np.zeros((1, 4, 4)))


# ---------------------------------------------------------------------------
# candidate records
# ---------------------------------------------------------------------------

def make_records(n, spec=None, iteration_of=lambda i: (i // 4) * 25,
                 pq_of=lambda i: 0.01 * i, seed=7):
    spec = spec or TargetSpec(shape="square", size=28, value=0.5)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        inducer = rng.uniform(0.1, 0.9, size=(32, 32, 1))
        composed = stimulus.composite(stimulus.upscale_nearest(inducer, 4),
                                      spec)
        records.append(CandidateRecord(
            iteration=iteration_of(i), inducer=inducer, stimulus=composed,
            pq_value=pq_of(i), bd_prob=0.5,
            diversity_at_iteration=0.02 + 0.001 * i))
    return records


class TestCandidateRecord:
    def test_boundary_probability_rejected(self):
        rec = make_records(1)[0]
        for bad in (0.0, 1.0):
            with pytest.raises(ValueError, match="strictly inside"):
                CandidateRecord(iteration=0, inducer=rec.inducer,
                                stimulus=rec.stimulus, pq_value=0.1,
                                bd_prob=bad, diversity_at_iteration=0.1)

    def test_non_finite_pq_rejected(self):
        rec = make_records(1)[0]
        with pytest.raises(ValueError, match="finite"):
            CandidateRecord(iteration=0, inducer=rec.inducer,
                            stimulus=rec.stimulus, pq_value=np.nan,
                            bd_prob=0.5, diversity_at_iteration=0.1)


class TestRecordIO:
    def test_round_trip_is_bit_exact(self, tmp_path):
        records = make_records(6)
        pq = PqConfig(kind="lightness", sign="right_minus_left")
        path = tmp_path / "records.npz"
        save_records(path, records, pq)
        loaded, loaded_pq = load_records(path)
        assert loaded_pq == pq
        assert len(loaded) == 6
        for orig, back in zip(records, loaded):
            assert back.iteration == orig.iteration
            assert np.array_equal(back.inducer, orig.inducer)
            assert np.array_equal(back.stimulus.image, orig.stimulus.image)
            assert np.array_equal(back.stimulus.left_mask,
                                  orig.stimulus.left_mask)
            assert back.stimulus.spec == orig.stimulus.spec
            assert back.pq_value == orig.pq_value
            assert back.bd_prob == orig.bd_prob
            assert back.diversity_at_iteration == orig.diversity_at_iteration

    def test_color_spec_round_trip(self, tmp_path):
        spec = TargetSpec(shape="square", size=20, value=(0.6, 0.5, 0.4))
        rng = np.random.default_rng(2)
        inducer = rng.uniform(0.2, 0.8, size=(32, 32, 3))
        composed = stimulus.composite(stimulus.upscale_nearest(inducer, 4),
                                      spec)
        rec = CandidateRecord(iteration=50, inducer=inducer,
                              stimulus=composed, pq_value=0.03, bd_prob=0.4,
                              diversity_at_iteration=0.05)
        pq = PqConfig(kind="color", sign="right_minus_left",
                      channel_weights=(0.0, 0.0, -1.0))
        path = tmp_path / "records.npz"
        save_records(path, [rec], pq)
        loaded, loaded_pq = load_records(path)
        assert loaded_pq.channel_weights == (0.0, 0.0, -1.0)
        assert loaded[0].stimulus.spec.value == (0.6, 0.5, 0.4)
        assert np.array_equal(loaded[0].stimulus.image, composed.image)

    def test_empty_list_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no records"):
            save_records(tmp_path / "x.npz", [],
                         PqConfig(kind="lightness", sign="right_minus_left"))

    def test_mixed_target_specs_rejected(self, tmp_path):
        a = make_records(1, spec=TargetSpec(shape="square", size=28,
                                            value=0.5))
        b = make_records(1, spec=TargetSpec(shape="square", size=20,
                                            value=0.5))
        with pytest.raises(ValueError, match="mix"):
            save_records(tmp_path / "x.npz", a + b,
                         PqConfig(kind="lightness", sign="right_minus_left"))

    def test_foreign_npz_rejected(self, tmp_path):
        path = tmp_path / "alien.npz"
        meta = json.dumps({"format": "something-else"}).encode()
        np.savez(path, __meta__=np.frombuffer(meta, dtype=np.uint8))
        with pytest.raises(ValueError, match="not a candidate records file"):
            load_records(path)


class TestSelectCandidates:
    def test_threshold_filters_and_count_honored(self):
        records = make_records(20)  # pq 0.00 .. 0.19
        chosen = select_candidates(records, k=5, pq_threshold=0.10)
        assert len(chosen) == 5
        assert all(r.pq_value >= 0.10 for r in chosen)

    def test_deterministic_for_fixed_seed(self):
        records = make_records(20)
        a = select_candidates(records, k=5, pq_threshold=0.05, seed=3)
        b = select_candidates(records, k=5, pq_threshold=0.05, seed=3)
        assert [r.pq_value for r in a] == [r.pq_value for r in b]

    def test_insufficient_qualifying_records(self):
        records = make_records(20)
        with pytest.raises(ValueError, match="need 8"):
            select_candidates(records, k=8, pq_threshold=0.15)

    def test_no_iteration_dominates(self):
        # 16 records at iteration 0, 16 at iteration 25; k=6 across the
        # 2 iterations means a cap of ceil(6/2)+1 = 4 from either one.
        records = make_records(32, iteration_of=lambda i: 25 * (i // 16),
                               pq_of=lambda i: 0.5)
        chosen = select_candidates(records, k=6, pq_threshold=0.1, seed=0)
        from collections import Counter
        per_iter = Counter(r.iteration for r in chosen)
        assert sum(per_iter.values()) == 6
        assert max(per_iter.values()) <= 4

    def test_lopsided_distribution_cannot_fill(self):
        # one iteration holds almost everything: the cap makes k
        # unreachable and that must be an error, not a quiet best-effort
        records = make_records(21, iteration_of=lambda i: 25 * (i // 20),
                               pq_of=lambda i: 0.5)
        with pytest.raises(ValueError, match="cannot fill"):
            select_candidates(records, k=10, pq_threshold=0.1)


class TestExportCandidates:
    def test_manifest_schema_and_checksums(self, tmp_path):
        records = make_records(6, iteration_of=lambda i: 25 * (i % 2))
        pq = PqConfig(kind="lightness", sign="right_minus_left")
        out = tmp_path / "export"
        manifest_path = export_candidates(records, out, pq, seed=9)
        manifest = json.loads(open(manifest_path).read())
        assert manifest["count"] == 6
        assert manifest["pq_kind"] == "lightness"
        assert len(manifest["candidates"]) == 6
        iters = [e["iteration"] for e in manifest["candidates"]]
        assert iters == sorted(iters)
        for entry in manifest["candidates"]:
            assert set(entry) == {"filename", "pq_value", "sign",
                                  "iteration", "seed", "sha256"}
            assert entry["sign"] == "right_minus_left"
            assert entry["seed"] == 9
            png = out / entry["filename"]
            digest = hashlib.sha256(png.read_bytes()).hexdigest()
            assert digest == entry["sha256"]

    def test_exported_pixels_round_trip(self, tmp_path):
        records = make_records(2)
        pq = PqConfig(kind="lightness", sign="right_minus_left")
        out = tmp_path / "export"
        manifest_path = export_candidates(records, out, pq)
        manifest = json.loads(open(manifest_path).read())
        by_iter = {}
        for rec in sorted(records, key=lambda r: (r.iteration, r.pq_value)):
            by_iter.setdefault(rec.iteration, []).append(rec)
        for entry in manifest["candidates"]:
            img = stimulus.load_image_png(out / entry["filename"])
            expected = [r for r in records
                        if r.iteration == entry["iteration"]
                        and r.pq_value == entry["pq_value"]][0]
            quantized = np.round(expected.stimulus.image * 255) / 255
            assert np.allclose(img, quantized, atol=1e-12)

    def test_exports_are_byte_identical_across_runs(self, tmp_path):
        records = make_records(4)
        pq = PqConfig(kind="lightness", sign="right_minus_left")
        m1 = export_candidates(records, tmp_path / "a", pq)
        m2 = export_candidates(records, tmp_path / "b", pq)
        assert open(m1, "rb").read() == open(m2, "rb").read()
        for entry in json.loads(open(m1).read())["candidates"]:
            assert (tmp_path / "a" / entry["filename"]).read_bytes() \
                == (tmp_path / "b" / entry["filename"]).read_bytes()


# ---------------------------------------------------------------------------
# training loops (skeletal networks, a handful of iterations)
# ---------------------------------------------------------------------------

class TestPretrain:
    def test_smoke_updates_params_and_sets_flag(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        before = {k: v.copy() for k, v in gen.tensors.items()}
        store = tiny_store()
        log = []
        config = TrainingConfig(batch_size=4, pretrain_epochs=2,
                                max_iterations=3, seed=0)
        pretrain_gan(gen, disc, store, config, log=log)
        assert gen.meta["pretrained"] is True
        assert disc.meta["pretrained"] is True
        assert len(log) == 3
        assert set(log[0]) == {"iteration", "d_loss", "g_loss",
                               "d_real_acc", "diversity"}
        assert all(np.isfinite(row["d_loss"]) for row in log)
        assert any(not np.array_equal(before[k], gen.tensors[k])
                   for k in before)

    def test_zero_iterations_leaves_flag_unset(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        config = TrainingConfig(batch_size=4, pretrain_epochs=0)
        pretrain_gan(gen, disc, tiny_store(), config)
        assert gen.meta["pretrained"] is False

    def test_channel_mismatch_rejected(self):
        gen = tiny_generator(channels=1)
        disc = tiny_discriminator(channels=1)
        store = tiny_store(channels=3)
        config = TrainingConfig(batch_size=4, pretrain_epochs=1)
        with pytest.raises(ValueError, match="channel mismatch"):
            pretrain_gan(gen, disc, store, config)


def finetune_args(**overrides):
    spec = TargetSpec(shape="square", size=28, value=0.5)
    pq = PqConfig(kind="lightness", sign="right_minus_left")
    args = dict(vts="identity", pq_config=pq, target_spec=spec,
                store=tiny_store(), restorer=None)
    args.update(overrides)
    return args


class TestFinetune:
    def test_unpretrained_generator_rejected(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        config = TrainingConfig(batch_size=4, max_iterations=1)
        a = finetune_args()
        with pytest.raises(ValueError, match="not pretrained"):
            finetune(gen, disc, a["vts"], a["pq_config"], a["target_spec"],
                     a["store"], config)

    def test_restorenet_requires_restorer(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        config = TrainingConfig(batch_size=4, max_iterations=1,
                                allow_unpretrained=True)
        a = finetune_args(vts="restorenet")
        with pytest.raises(ValueError, match="needs restorer"):
            finetune(gen, disc, a["vts"], a["pq_config"], a["target_spec"],
                     a["store"], config)

    def test_color_target_on_gray_generator_rejected(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        config = TrainingConfig(batch_size=4, max_iterations=1,
                                allow_unpretrained=True)
        a = finetune_args(target_spec=TargetSpec(shape="square", size=28,
                                                 value=(0.6, 0.5, 0.4)))
        with pytest.raises(ValueError, match="channel count"):
            finetune(gen, disc, a["vts"], a["pq_config"], a["target_spec"],
                     a["store"], config)

    def test_smoke_records_and_log(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        config = TrainingConfig(batch_size=4, max_iterations=5,
                                record_every=2, allow_unpretrained=True,
                                seed=1)
        a = finetune_args()
        log = []
        gen, records = finetune(gen, disc, a["vts"], a["pq_config"],
                                a["target_spec"], a["store"], config,
                                log=log)
        assert len(log) == 5
        assert {r.iteration for r in records} == {0, 2, 4}
        assert len(records) == 3 * 4
        for rec in records:
            assert 0.0 < rec.bd_prob < 1.0
            assert rec.inducer.shape == (32, 32, 1)
            assert rec.stimulus.image.shape == (128, 128, 1)
            # identity task on freshly pasted equal targets: no difference
            assert rec.pq_value == 0.0
        assert set(log[0]) == {"iteration", "loss", "id_term", "bd_term",
                               "pq_mean", "pq_median", "bd_prob_mean",
                               "diversity"}

    def test_beta_zero_leaves_discriminator_untouched(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        before = {k: v.copy() for k, v in disc.tensors.items()}
        config = TrainingConfig(beta=0.0, batch_size=4, max_iterations=3,
                                allow_unpretrained=True, seed=1)
        a = finetune_args()
        finetune(gen, disc, a["vts"], a["pq_config"], a["target_spec"],
                 a["store"], config)
        for k in before:
            assert np.array_equal(before[k], disc.tensors[k])

    def test_pretrained_flag_from_pretrain_is_accepted(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        store = tiny_store()
        pretrain_gan(gen, disc, store,
                     TrainingConfig(batch_size=4, pretrain_epochs=1,
                                    max_iterations=2, seed=0))
        a = finetune_args(store=store)
        config = TrainingConfig(batch_size=4, max_iterations=2, seed=1)
        _, records = finetune(gen, disc, a["vts"], a["pq_config"],
                              a["target_spec"], a["store"], config)
        assert records  # ran without allow_unpretrained

    def test_restorer_parameters_frozen_through_run(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        restorer = networks.init_restorenet(rng=np.random.default_rng(6))
        before = {k: v.copy() for k, v in restorer.tensors.items()}
        config = TrainingConfig(batch_size=2, max_iterations=2,
                                allow_unpretrained=True, seed=1)
        a = finetune_args(vts="restorenet", restorer=restorer)
        finetune(gen, disc, a["vts"], a["pq_config"], a["target_spec"],
                 a["store"], config, restorer=restorer)
        for k in before:
            assert np.array_equal(before[k], restorer.tensors[k])

    def test_early_stop_halts_before_iteration_cap(self):
        # learning rates near zero freeze the loss; with identity pq the
        # ID term is exactly constant, so the plateau rule must fire as
        # soon as two stop windows of epochs exist
        gen = tiny_generator()
        disc = tiny_discriminator()
        store = tiny_store(n=4)
        config = TrainingConfig(batch_size=2, max_epochs=40, stop_window=2,
                                stop_tolerance=0.5, lr_generator=1e-12,
                                lr_discriminator=1e-12,
                                allow_unpretrained=True, seed=1)
        log = []
        a = finetune_args(store=store)
        finetune(gen, disc, a["vts"], a["pq_config"], a["target_spec"],
                 a["store"], config, log=log)
        iters_per_epoch = math.ceil(4 / 2)
        assert len(log) == 2 * config.stop_window * iters_per_epoch

    def test_unknown_vts_rejected(self):
        gen = tiny_generator()
        disc = tiny_discriminator()
        config = TrainingConfig(batch_size=4, max_iterations=1,
                                allow_unpretrained=True)
        a = finetune_args(vts="telepathy")
        with pytest.raises(ValueError, match="unknown visual task solver"):
            finetune(gen, disc, a["vts"], a["pq_config"], a["target_spec"],
                     a["store"], config)
