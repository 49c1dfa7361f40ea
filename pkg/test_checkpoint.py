"""
Tests for the checkpoint container: exact round trips and corruption detection
"""

import json
import os

import numpy as np
import pytest

from checkpoint import BLOB_NAME, MANIFEST_NAME, load_checkpoint, load_pretrained, read_manifest, save_checkpoint, save_pretrained
from exceptions import CheckpointError, exit_code_for
from fusion import pretrain, score_samples, strategy_net_spec
from models import AutoencoderHyperParams, FusionStrategy, Hypersphere, SvddHyperParams, SvddModel
from nets import build_encoder


@pytest.fixture
def model(tiny_spec):
    rng = np.random.default_rng(17)
    net_spec = strategy_net_spec(tiny_spec, FusionStrategy.LATE, 2)
    encoder = build_encoder(net_spec, rng, np.float32)
    sphere = Hypersphere(rng.normal(size=tiny_spec.latent_dim), 0.731)
    return SvddModel(
        encoder, sphere, SvddHyperParams(nu=0.2), FusionStrategy.LATE, net_spec, loss_history=[1.5, 1.25], radius_history=[0.7, 0.731]
    )


@pytest.fixture
def saved(model, tmp_path):
    path = str(tmp_path / "ckpt")
    save_checkpoint(model, path, seed=3, dataset_fingerprint="abc", config_hash="def")
    return path


def edit_manifest(path, change):
    manifest_path = os.path.join(path, MANIFEST_NAME)
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    change(manifest)
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f)


class TestRoundTrip:
    def test_scores_identical_after_reload(self, model, saved, tiny_dices):
        _, test = tiny_dices
        loaded = load_checkpoint(saved)
        np.testing.assert_array_equal(score_samples(loaded, test), score_samples(model, test))
        assert loaded.fusion_tag == FusionStrategy.LATE
        assert loaded.sphere.radius == model.sphere.radius
        np.testing.assert_array_equal(loaded.sphere.center, model.sphere.center)
        assert loaded.hp == model.hp
        assert loaded.loss_history == [1.5, 1.25]

    def test_resave_is_byte_identical(self, saved, tmp_path):
        again = str(tmp_path / "again")
        save_checkpoint(load_checkpoint(saved), again, seed=3, dataset_fingerprint="abc", config_hash="def")
        for name in (BLOB_NAME, MANIFEST_NAME):
            assert open(os.path.join(saved, name), "rb").read() == open(os.path.join(again, name), "rb").read()

    def test_provenance_recorded(self, saved):
        manifest = read_manifest(saved)
        assert manifest["seed"] == 3
        assert manifest["dataset_fingerprint"] == "abc"
        assert manifest["config_hash"] == "def"
        assert [t["name"] for t in manifest["tensors"]] == ["conv1", "conv2", "fc"]

    def test_pretrained_round_trip(self, tiny_spec, tiny_dices, tmp_path):
        train, _ = tiny_dices
        hp = AutoencoderHyperParams(batch_size=8, epochs=1)
        pretrained = pretrain(FusionStrategy.LATE_DUAL, train, tiny_spec, hp, np.random.default_rng(0), dtype=np.float32)
        path = save_pretrained(pretrained, str(tmp_path / "pre"))
        loaded = load_pretrained(path)
        assert loaded.strategy == FusionStrategy.LATE_DUAL
        assert len(loaded.decoders) == 2
        for original, restored in zip(pretrained.decoders, loaded.decoders):
            for (name, a), (_, b) in zip(original, restored):
                np.testing.assert_array_equal(a.data, b.data)


class TestCorruption:
    def test_flipped_byte_names_tensor(self, saved):
        blob_path = os.path.join(saved, BLOB_NAME)
        raw = bytearray(open(blob_path, "rb").read())
        raw[len(raw) - 5] ^= 0xFF
        open(blob_path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum mismatch in tensor encoder/fc") as info:
            load_checkpoint(saved)
        assert exit_code_for(info.value) == 3

    def test_truncated_blob(self, saved):
        blob_path = os.path.join(saved, BLOB_NAME)
        raw = open(blob_path, "rb").read()
        open(blob_path, "wb").write(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(saved)

    def test_trailing_bytes(self, saved):
        with open(os.path.join(saved, BLOB_NAME), "ab") as f:
            f.write(b"\x00" * 4)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(saved)

    def test_offset_disagreement(self, saved):
        def shift(manifest):
            manifest["tensors"][1]["offset"] += 4

        edit_manifest(saved, shift)
        with pytest.raises(CheckpointError, match="offset"):
            load_checkpoint(saved)

    def test_newer_format_version(self, saved):
        edit_manifest(saved, lambda m: m.update(format_version=99))
        with pytest.raises(CheckpointError, match="upgrade"):
            load_checkpoint(saved)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "nothing"))

    def test_wrong_kind(self, saved):
        with pytest.raises(CheckpointError, match="not pretrained"):
            load_pretrained(saved)

    def test_missing_blob(self, saved):
        os.remove(os.path.join(saved, BLOB_NAME))
        with pytest.raises(CheckpointError, match="no tensor blob") as info:
            load_checkpoint(saved)
        assert exit_code_for(info.value) == 3

    @pytest.mark.parametrize(
        "change",
        [
            lambda m: m.pop("sphere"),
            lambda m: m["hp"].update(momentum=0.9),
            lambda m: m.update(fusion_tag="middle"),
            lambda m: m.pop("radius_history"),
            lambda m: m.pop("net_spec"),
            lambda m: m["tensors"][0].pop("sha256"),
            lambda m: m.update(tensors=None),
        ],
        ids=["no-sphere", "extra-hp-key", "bad-fusion-tag", "no-radius-history", "no-net-spec", "no-digest", "no-table"],
    )
    def test_malformed_manifest_fields(self, saved, change):
        edit_manifest(saved, change)
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(saved)
        assert exit_code_for(info.value) == 3

    def test_pretrained_without_decoder_count(self, tiny_spec, tiny_dices, tmp_path):
        train, _ = tiny_dices
        hp = AutoencoderHyperParams(batch_size=8, epochs=1)
        pretrained = pretrain(FusionStrategy.LATE_DUAL, train, tiny_spec, hp, np.random.default_rng(0), dtype=np.float32)
        path = save_pretrained(pretrained, str(tmp_path / "pre"))
        edit_manifest(path, lambda m: m.pop("n_decoders"))
        with pytest.raises(CheckpointError, match="pretrained networks") as info:
            load_pretrained(path)
        assert exit_code_for(info.value) == 3
