import numpy as np
import pytest

from tefbench import features as feat
from tefbench import tbf
from tefbench.corpus import BENIGN, MALICIOUS, CorpusConfig, gen_binary, load_ingredients
from tefbench.env import ActionId, apply_action
from tefbench.tbf import Section, ToyBinary

CFG = CorpusConfig(n_target_train_per_class=20, n_aux_per_class=20,
                   n_eval_per_class=20, n_attack_malware=10, n_benign_ingredients=6)


def zero_payload_binary(n=1024):
    return tbf.fix_checksum(ToyBinary(
        version=1, machine_type=0, timestamp=1_500_000_000, checksum=0,
        os_major=6, os_minor=1, debug_blob=None, packed=False,
        sections=(Section("code", tbf.SEC_EXEC, n, b"\x00" * n),),
        imports=(), overlay=b""))


class TestVectorContract:
    @pytest.mark.parametrize("label", [BENIGN, MALICIOUS])
    def test_shape_range_finite(self, label):
        for seed in range(30):
            v = feat.extract_features(gen_binary(label, seed, CFG))
            assert v.shape == (feat.FEATURE_DIM,)
            assert np.all(v >= 0.0) and np.all(v <= 1.0)
            assert np.all(np.isfinite(v))

    def test_determinism(self):
        b = gen_binary(MALICIOUS, 3, CFG)
        assert np.array_equal(feat.extract_features(b), feat.extract_features(b))
        b2 = tbf.parse(tbf.serialize(b))
        assert np.array_equal(feat.extract_features(b), feat.extract_features(b2))

    def test_zero_payload_histograms(self):
        v = feat.extract_features(zero_payload_binary())
        assert v[0] == 1.0                       # all content bytes in bin 0
        assert np.all(v[1:64] == 0.0)
        assert v[64] == 1.0                      # every window at entropy bucket 0
        assert np.all(v[65:80] == 0.0)

    def test_header_features(self):
        b = zero_payload_binary()
        v = feat.extract_features(b)
        assert v[feat.F_CHECKSUM_OK] == 1.0
        assert v[feat.F_DEBUG] == 0.0
        assert v[feat.F_PACKED] == 0.0
        assert v[feat.F_TS_PLAUSIBLE] == 1.0
        assert v[84] == 1.0  # machine_type 0 one-hot
        broken = tbf.ToyBinary(**{**b.__dict__, "checksum": b.checksum + 1})
        assert feat.extract_features(broken)[feat.F_CHECKSUM_OK] == 0.0


class TestDifferentialProperties:
    @pytest.fixture(scope="class")
    def ingredients(self, tmp_path_factory):
        from tefbench.corpus import build_corpus, load_splits
        root = tmp_path_factory.mktemp("feat_corpus")
        build_corpus(CFG, root)
        return load_ingredients(load_splits(root, 0))

    def test_benign_overlay_changes_byte_histogram(self, ingredients):
        rng = np.random.default_rng(0)
        for seed in range(25):
            b = gen_binary(MALICIOUS, seed, CFG)
            v0 = feat.extract_features(b)
            b2 = apply_action(b, ActionId.append_benign_data_overlay, ingredients, rng)
            v1 = feat.extract_features(b2)
            assert np.any(v0[feat.F_BYTE_HIST] != v1[feat.F_BYTE_HIST]), seed

    def test_rename_touches_only_name_bins(self, ingredients):
        rng = np.random.default_rng(1)
        changed_somewhere = False
        for seed in range(25):
            b = gen_binary(MALICIOUS, seed, CFG)
            v0 = feat.extract_features(b)
            b2 = apply_action(b, ActionId.rename_section, ingredients, rng)
            v1 = feat.extract_features(b2)
            outside = np.delete(np.arange(feat.FEATURE_DIM),
                                np.arange(feat.F_NAME_BINS.start, feat.F_NAME_BINS.stop))
            assert np.array_equal(v0[outside], v1[outside]), seed
            changed_somewhere |= not np.array_equal(v0, v1)
        assert changed_somewhere

    def test_timestamp_touches_only_timestamp_features(self, ingredients):
        rng = np.random.default_rng(2)
        for seed in range(25):
            b = gen_binary(MALICIOUS, seed, CFG)
            v0 = feat.extract_features(b)
            b2 = apply_action(b, ActionId.modify_timestamp, ingredients, rng)
            v1 = feat.extract_features(b2)
            outside = np.delete(np.arange(feat.FEATURE_DIM),
                                [feat.F_TIMESTAMP, feat.F_TS_PLAUSIBLE])
            assert np.array_equal(v0[outside], v1[outside]), seed

    def test_break_checksum_touches_only_checksum_flag(self, ingredients):
        rng = np.random.default_rng(3)
        b = gen_binary(MALICIOUS, 7, CFG)
        v0 = feat.extract_features(b)
        v1 = feat.extract_features(apply_action(b, ActionId.break_checksum,
                                                ingredients, rng))
        diff = np.flatnonzero(v0 != v1)
        assert diff.tolist() == [feat.F_CHECKSUM_OK]


class TestSensitivity:
    """Every action must move at least one coordinate on >95% of 1,000 trials."""

    TRIALS = 1000

    @pytest.fixture(scope="class")
    def world(self, tmp_path_factory):
        from tefbench.corpus import build_corpus, load_splits
        root = tmp_path_factory.mktemp("sens_corpus")
        build_corpus(CFG, root)
        ingredients = load_ingredients(load_splits(root, 0))
        binaries = [gen_binary(MALICIOUS, 1000 + i, CFG) for i in range(self.TRIALS)]
        baselines = [feat.extract_features(b) for b in binaries]
        return ingredients, binaries, baselines

    @pytest.mark.parametrize("action", list(ActionId))
    def test_action_sensitivity(self, world, action):
        ingredients, binaries, baselines = world
        rng = np.random.default_rng(int(action))
        hits = 0
        for b, v0 in zip(binaries, baselines):
            b2 = apply_action(b, action, ingredients, rng)
            if not np.array_equal(v0, feat.extract_features(b2)):
                hits += 1
        assert hits / self.TRIALS > 0.95, f"{action.name}: {hits}/{self.TRIALS}"


class TestMatrixIo:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.random((7, 128)).astype(np.float32)
        y = rng.integers(0, 2, 7)
        path = tmp_path / "m.bin"
        feat.save_matrix(path, X, y)
        X2, y2 = feat.load_matrix(path, with_labels=True)
        assert np.allclose(X, X2)
        assert np.array_equal(y, y2)
        raw = path.read_bytes()
        assert len(raw) == 8 + 7 * 128 * 4
