"""Few-shot registration and frozen-backbone adaptation of embedding columns."""

import numpy as np
import pytest

from soundext.adaptation import (
    AdaptationConfig,
    adapt,
    build_adaptation_set,
    embed_for_class,
    register_new_classes,
)
from soundext.checkpoint import init_checkpoint
from soundext.conditioning import WaveformEmbedder, average_embeddings, encode_enrollment
from soundext.model import micro_config
from soundext.scenes import GeneratorConfig

SEEN = ["am_band", "chirp_sweep", "rumble_low", "tone_mid"]
NEW = ["hiss_top", "tone_high"]


@pytest.fixture(scope="module")
def base_ckpt():
    ckpt = init_checkpoint(micro_config(), SEEN, seed=9)
    ckpt.metadata["mode"] = "mixed_el"
    return ckpt


@pytest.fixture(scope="module")
def pools(small_banks):
    bank, _ = small_banks
    return {label: bank.source_ids(label)[:2] for label in NEW}


@pytest.fixture(scope="module")
def adaptation_store(small_banks, base_ckpt, pools, tmp_path_factory):
    bank, noise = small_banks
    cfg = AdaptationConfig(k_shots=2, epochs=2, adaptation_mixtures=6, seed=4, batch_size=3)
    regs = register_new_classes(base_ckpt, pools, bank, cfg)
    root = tmp_path_factory.mktemp("adaptdata")
    store = build_adaptation_set(
        bank, noise, GeneratorConfig(n_events=3, master_seed=55), SEEN, regs, cfg, root
    )
    return store, regs, cfg


class TestRegistration:
    def test_avg_init_with_k1_equals_single_encoding(self, small_banks, base_ckpt):
        bank, _ = small_banks
        source = bank.source_ids("hiss_top")[0]
        cfg = AdaptationConfig(k_shots=1, init="avg", seed=1)
        reg = register_new_classes(base_ckpt, {"hiss_top": [source]}, bank, cfg)[0]
        single = encode_enrollment(bank.clip(source).waveform, base_ckpt.to_model().enrollment)
        np.testing.assert_allclose(reg.initial, single, rtol=1e-6, atol=1e-7)

    def test_avg_init_is_shot_average(self, small_banks, base_ckpt, pools):
        bank, _ = small_banks
        cfg = AdaptationConfig(k_shots=2, init="avg", seed=1)
        reg = register_new_classes(base_ckpt, {"tone_high": pools["tone_high"]}, bank, cfg)[0]
        embed = WaveformEmbedder(base_ckpt.to_model().enrollment)
        expected = average_embeddings(
            [bank.clip(s).waveform for s in pools["tone_high"]], embed
        )
        np.testing.assert_allclose(reg.initial, expected, rtol=1e-6, atol=1e-7)

    def test_random_init_matches_matrix_distribution(self, small_banks, base_ckpt, pools):
        bank, _ = small_banks
        cfg = AdaptationConfig(k_shots=2, init="random", seed=1)
        reg = register_new_classes(base_ckpt, {"tone_high": pools["tone_high"]}, bank, cfg)[0]
        bound = 1.0 / np.sqrt(base_ckpt.model_config.embed_dim)
        assert np.all(np.abs(reg.initial) <= bound)
        assert reg.init_kind == "random"

    def test_existing_label_rejected(self, small_banks, base_ckpt):
        bank, _ = small_banks
        cfg = AdaptationConfig(seed=1)
        with pytest.raises(ValueError, match="already in the vocabulary"):
            register_new_classes(base_ckpt, {"tone_mid": ["tone_mid_000"]}, bank, cfg)


class TestAdaptationSet:
    def test_scene_shape_and_pool(self, adaptation_store, pools):
        store, _, cfg = adaptation_store
        assert len(store) == cfg.adaptation_mixtures
        for manifest in store.manifests:
            labels = [e.class_label for e in manifest.events]
            assert manifest.target_class in NEW
            assert labels.count(manifest.target_class) == 1
            seen_events = [l for l in labels if l in SEEN]
            assert len(seen_events) == 2
            assert len(set(seen_events)) == 2
            new_event = next(e for e in manifest.events if e.class_label == manifest.target_class)
            assert new_event.source_id in pools[manifest.target_class]


class TestAdapt:
    def test_freeze_and_improvement(self, small_banks, base_ckpt, adaptation_store):
        store, regs, cfg = adaptation_store
        adapted, report = adapt(base_ckpt, regs, store, cfg)

        # only the new columns and metadata may differ
        for key, value in base_ckpt.extraction_state.items():
            assert np.array_equal(adapted.extraction_state[key], value)
        for key, value in base_ckpt.enrollment_state.items():
            assert np.array_equal(adapted.enrollment_state[key], value)
        n_old = base_ckpt.embedding.num_classes
        assert adapted.embedding.num_classes == n_old + len(NEW)
        assert np.array_equal(adapted.embedding.values[:, :n_old], base_ckpt.embedding.values)
        assert not adapted.embedding.trainable[:n_old].any()
        assert adapted.embedding.trainable[n_old:].all()
        assert adapted.vocab.labels == SEEN + NEW
        assert sorted(adapted.metadata["adapted_labels"]) == sorted(NEW)

        # training on the adaptation scenes should not make things worse
        for label in NEW:
            losses = report["labels"][label]["epoch_losses"]
            assert losses[-1] <= losses[0] + 1e-6
            changed = report["labels"][label]["column_delta_norm"]
            assert changed > 0.0

    def test_collision_rejected(self, small_banks, base_ckpt, adaptation_store):
        store, regs, cfg = adaptation_store
        adapted, _ = adapt(base_ckpt, regs, store, cfg)
        with pytest.raises(ValueError, match="collides"):
            adapt(adapted, regs, store, cfg)

    def test_enrollment_only_model_rejected(self, small_banks, base_ckpt, adaptation_store):
        store, regs, cfg = adaptation_store
        enrl_ckpt = init_checkpoint(micro_config(), SEEN, seed=9)
        enrl_ckpt.metadata["mode"] = "enrollment"
        with pytest.raises(ValueError, match="1-hot pathway"):
            adapt(enrl_ckpt, regs, store, cfg)

    def test_joint_equals_per_class(self, small_banks, base_ckpt, adaptation_store, pools):
        bank, _ = small_banks
        store, regs, cfg = adaptation_store
        joint, _ = adapt(base_ckpt, regs, store, cfg)
        for reg_index, label in enumerate(NEW):
            single_regs = register_new_classes(base_ckpt, {label: pools[label]}, bank, cfg)
            single, _ = adapt(base_ckpt, single_regs, store, cfg)
            joint_col = joint.embedding.values[:, joint.vocab.index(label)]
            single_col = single.embedding.values[:, single.vocab.index(label)]
            assert np.array_equal(joint_col, single_col), label

    def test_checkpoint_file_diff_confined(self, base_ckpt, adaptation_store, tmp_path):
        store, regs, cfg = adaptation_store
        adapted, _ = adapt(base_ckpt, regs, store, cfg)
        base_ckpt.save(tmp_path / "before")
        adapted.save(tmp_path / "after")
        before_files = {p.name: p.read_bytes() for p in (tmp_path / "before" / "weights").glob("*.npy")}
        after_files = {p.name: p.read_bytes() for p in (tmp_path / "after" / "weights").glob("*.npy")}
        assert set(before_files) == set(after_files)
        for name in before_files:
            if name == "embedding.matrix.npy":
                assert before_files[name] != after_files[name]
            else:
                assert before_files[name] == after_files[name], name


class TestEmbedForClass:
    def test_seen_label_returns_column(self, base_ckpt):
        emb = embed_for_class(base_ckpt, label="tone_mid")
        idx = base_ckpt.vocab.index("tone_mid")
        assert np.array_equal(emb, base_ckpt.embedding.values[:, idx])

    def test_shots_return_average(self, small_banks, base_ckpt):
        bank, _ = small_banks
        shots = [bank.clip(s).waveform for s in bank.source_ids("hiss_top")[:2]]
        emb = embed_for_class(base_ckpt, shots=shots)
        embedder = WaveformEmbedder(base_ckpt.to_model().enrollment)
        np.testing.assert_allclose(emb, average_embeddings(shots, embedder), rtol=1e-6, atol=1e-7)

    def test_adapted_label_returns_trained_column(self, base_ckpt, adaptation_store):
        store, regs, cfg = adaptation_store
        adapted, _ = adapt(base_ckpt, regs, store, cfg)
        for reg in regs:
            column = embed_for_class(adapted, label=reg.label)
            assert not np.array_equal(column, reg.initial)
            assert np.array_equal(column, reg.adapted.astype(np.float32))

    def test_unknown_label_without_shots(self, base_ckpt):
        with pytest.raises(KeyError, match="unknown label"):
            embed_for_class(base_ckpt, label="mystery")
