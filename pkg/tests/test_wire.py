"""Serialization round trips, closed-form sizes, and corruption handling."""

import numpy as np
import pytest

from fedoap.autodiff import Tensor
from fedoap.errors import BadMagic, TruncatedFile, VersionUnsupported
from fedoap.model import KVTokens, ModelConfig, init_model
from fedoap.wire import (
    HEADER_BYTES,
    KIND_BROADCAST,
    KIND_CHECKPOINT,
    KIND_ROUND,
    MAGIC,
    SERVER_ID,
    kv_section_bytes,
    load_checkpoint,
    message_bytes,
    parse_message,
    save_checkpoint,
    serialize_message,
    tensor_section_bytes,
)

TINY = ModelConfig(image_size=16, base_channels=2, depth=2, attention_heads=2)


def sample_payload(rng):
    tensors = {
        "enc.w": rng.normal(size=(3, 2, 3, 3)),
        "enc.b": rng.normal(size=3),
        "scalarish": rng.normal(size=(1,)),
    }
    kvs = [
        KVTokens(Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(4, 8))), 0, 2),
        KVTokens(Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(2, 8))), 1, 2),
    ]
    return tensors, kvs


class TestRoundTrip:
    def test_header_fields_survive(self, rng):
        tensors, kvs = sample_payload(rng)
        blob = serialize_message(KIND_ROUND, 7, 3, tensors, kvs)
        msg = parse_message(blob)
        assert (msg.kind, msg.round, msg.sender) == (KIND_ROUND, 7, 3)
        assert blob[:4] == MAGIC

    def test_tensors_round_trip_at_f32_precision(self, rng):
        tensors, kvs = sample_payload(rng)
        msg = parse_message(serialize_message(KIND_BROADCAST, 0, SERVER_ID, tensors, kvs))
        assert sorted(msg.tensors) == sorted(tensors)
        for name, arr in tensors.items():
            want = arr.astype("<f4").astype(np.float64)
            np.testing.assert_array_equal(msg.tensors[name], want)
            assert msg.tensors[name].shape == arr.shape

    def test_f32_representable_values_exact(self):
        arr = np.array([0.5, -1.25, 3.0, 0.0078125])
        msg = parse_message(serialize_message(KIND_ROUND, 0, 0, {"x": arr}))
        np.testing.assert_array_equal(msg.tensors["x"], arr)

    def test_kv_sections_round_trip_in_order(self, rng):
        tensors, kvs = sample_payload(rng)
        msg = parse_message(serialize_message(KIND_ROUND, 2, 1, {}, kvs))
        assert [k.client_id for k in msg.kv_sections] == [0, 1]
        assert [k.round for k in msg.kv_sections] == [2, 2]
        for got, want in zip(msg.kv_sections, kvs):
            np.testing.assert_array_equal(
                got.keys.values, want.keys.values.astype("<f4").astype(np.float64))
            np.testing.assert_array_equal(
                got.values.values, want.values.values.astype("<f4").astype(np.float64))

    def test_empty_message(self):
        blob = serialize_message(KIND_ROUND, 0, 0, {})
        assert len(blob) == HEADER_BYTES
        msg = parse_message(blob)
        assert msg.tensors == {} and msg.kv_sections == []


class TestClosedFormSizes:
    def test_measured_equals_formula(self, rng):
        tensors, kvs = sample_payload(rng)
        blob = serialize_message(KIND_ROUND, 1, 0, tensors, kvs)
        want = message_bytes({n: a.shape for n, a in tensors.items()},
                             [(k.n_tokens, k.dim) for k in kvs])
        assert len(blob) == want

    def test_section_formulas(self):
        assert tensor_section_bytes("ab", (2, 3)) == 4 + 2 + 1 + 8 + 4 * 6
        assert kv_section_bytes(4, 8) == 16 + 4 * 64

    def test_full_model_store_size(self):
        store = init_model(TINY, 0)
        shapes = store.shapes()
        blob = serialize_message(KIND_CHECKPOINT, 0, SERVER_ID,
                                 {n: store[n] for n in store.names()})
        assert len(blob) == message_bytes(shapes, [])


class TestCorruption:
    def test_bad_magic(self, rng):
        blob = bytearray(serialize_message(KIND_ROUND, 0, 0, {"x": rng.normal(size=2)}))
        blob[:4] = b"JUNK"
        with pytest.raises(BadMagic):
            parse_message(bytes(blob))

    def test_unsupported_version(self, rng):
        blob = bytearray(serialize_message(KIND_ROUND, 0, 0, {"x": rng.normal(size=2)}))
        blob[4] = 9
        with pytest.raises(VersionUnsupported):
            parse_message(bytes(blob))

    @pytest.mark.parametrize("cut", [1, 30, 63, 70])
    def test_truncation_detected(self, rng, cut):
        blob = serialize_message(KIND_ROUND, 0, 0, {"x": rng.normal(size=(4, 4))})
        with pytest.raises(TruncatedFile):
            parse_message(blob[:-cut])

    def test_trailing_garbage_detected(self, rng):
        blob = serialize_message(KIND_ROUND, 0, 0, {"x": rng.normal(size=2)})
        with pytest.raises(TruncatedFile):
            parse_message(blob + b"\x00")


class TestCheckpoints:
    def test_round_trip(self, rng, tmp_path):
        store = init_model(TINY, 5)
        path = tmp_path / "model.foap"
        save_checkpoint(path, store, round_index=4)
        loaded = load_checkpoint(path)
        assert sorted(loaded) == store.names()
        for name in store.names():
            want = store[name].astype("<f4").astype(np.float64)
            np.testing.assert_array_equal(loaded[name], want)

    def test_rejects_non_checkpoint_kind(self, rng, tmp_path):
        path = tmp_path / "notckpt.foap"
        path.write_bytes(serialize_message(KIND_ROUND, 0, 0, {"x": rng.normal(size=2)}))
        with pytest.raises(BadMagic):
            load_checkpoint(path)
