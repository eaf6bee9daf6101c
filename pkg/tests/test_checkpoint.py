import json

import numpy as np
import pytest

from infkit.checkpoint import decode, encode, export_json, from_json, load_checkpoint, save_checkpoint, to_json
from infkit.errors import ConfigError, RefusedError
from infkit.model import ModelSpec


def params():
    spec = ModelSpec.mlp([3, 4, 2])
    p = spec.init_params(0)
    return spec, p.with_values(p.values + np.linspace(-1, 1, p.n) * np.pi)


def test_binary_round_trip_is_bitwise(tmp_path):
    spec, p = params()
    save_checkpoint(tmp_path / "m.gifc", p)
    q = load_checkpoint(tmp_path / "m.gifc", spec)
    assert q.values.tobytes() == p.values.tobytes()
    assert q.layer_map == p.layer_map
    assert encode(q) == encode(p)


def test_header_layout():
    _, p = params()
    payload = encode(p)
    assert payload[:4] == b"GIFC"
    assert int.from_bytes(payload[4:8], "little") == 1
    assert int.from_bytes(payload[8:12], "little") == 4


def test_version_mismatch_refused():
    _, p = params()
    payload = bytearray(encode(p))
    payload[4] = 2
    with pytest.raises(RefusedError):
        decode(bytes(payload))


def test_corrupt_payloads_rejected():
    _, p = params()
    payload = encode(p)
    with pytest.raises(ConfigError):
        decode(b"XXXX" + payload[4:])
    with pytest.raises(ConfigError):
        decode(payload[:-3])
    with pytest.raises(ConfigError):
        decode(payload + b"\0")


def test_layout_mismatch_refused(tmp_path):
    _, p = params()
    save_checkpoint(tmp_path / "m.gifc", p)
    with pytest.raises(RefusedError):
        load_checkpoint(tmp_path / "m.gifc", ModelSpec.mlp([3, 5, 2]))


def test_json_mirror_round_trip(tmp_path):
    spec, p = params()
    export_json(tmp_path / "m.json", p, spec)
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["model"] == spec.to_dict()
    assert from_json(doc).values.tobytes() == p.values.tobytes()
    doc = to_json(p)
    doc["version"] = 7
    with pytest.raises(RefusedError):
        from_json(doc)
