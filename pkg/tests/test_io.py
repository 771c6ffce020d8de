import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafbifpn import tensor as T
from cafbifpn.errors import ConfigError, FormatError
from cafbifpn.tensorio import (FIXTURE_DIMS, RunConfig, config_parse,
                               config_validate, crop, gen_fixture,
                               load_backbone, load_fixture, pad_to_multiple,
                               tensor_read, tensor_write)

from conftest import arr


# -- tensor files --------------------------------------------------------

@given(st.lists(st.integers(1, 5), min_size=1, max_size=4),
       st.sampled_from(["float32", "float64"]),
       st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_round_trip_bit_identical(tmp_path_factory, dims, dtype, seed):
    path = tmp_path_factory.mktemp("rt") / "t.tnsr"
    t = T.Rng(seed).tensor(dims, -3.0, 3.0).astype(dtype)
    tensor_write(path, t)
    back = tensor_read(path)
    assert back.dtype == dtype
    assert np.array_equal(back.array, t.array)
    first = path.read_bytes()
    tensor_write(path, back)
    assert path.read_bytes() == first


def _good_bytes(tmp_path):
    path = tmp_path / "g.tnsr"
    tensor_write(path, T.Rng(5).tensor([2, 3], -1.0, 1.0))
    return path, bytearray(path.read_bytes())


@pytest.mark.parametrize("mutate,offset_word", [
    (lambda b: b[:5], "offset 0"),                          # header cut short
    (lambda b: b"XXXX" + bytes(b[4:]), "bad magic"),
    (lambda b: b[:4] + bytes([9]) + bytes(b[5:]), "version"),
    (lambda b: b[:5] + bytes([7]) + bytes(b[6:]), "dtype"),
    (lambda b: b[:7] + bytes([1]) + bytes(b[8:]), "reserved"),
    (lambda b: b[:12], "extent bytes"),                     # rank 2 needs 16
    (lambda b: b[:-8], "payload"),
    (lambda b: bytes(b) + b"\x00" * 4, "payload"),
])
def test_malformed_files_rejected(tmp_path, mutate, offset_word):
    path, blob = _good_bytes(tmp_path)
    path.write_bytes(bytes(mutate(blob)))
    with pytest.raises(FormatError, match=offset_word):
        tensor_read(path)


def test_zero_extent_rejected(tmp_path):
    path, blob = _good_bytes(tmp_path)
    blob[8:16] = (0).to_bytes(8, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="extents"):
        tensor_read(path)


def test_errors_name_byte_offsets(tmp_path):
    path, blob = _good_bytes(tmp_path)
    path.write_bytes(bytes(blob[:-8]))
    with pytest.raises(FormatError, match=r"offset 24"):
        tensor_read(path)


# -- run configuration ---------------------------------------------------

def test_empty_config_is_defaults():
    assert config_parse("{}") == RunConfig()


def test_config_round_trips_every_field():
    text = json.dumps({"regions_s": 4, "topk_k": 8, "heads": 2,
                       "fusion_width": 12, "epsilon": 0.01, "dilation": 1,
                       "lce_kernel": 3, "activation": "none",
                       "cfe_enabled": False, "attention_fusion_enabled": False,
                       "topdown_source": "input", "seed": 9})
    cfg = config_parse(text)
    assert cfg == RunConfig(regions_s=4, topk_k=8, heads=2, fusion_width=12,
                            epsilon=0.01, dilation=1, lce_kernel=3,
                            activation="none", cfe_enabled=False,
                            attention_fusion_enabled=False,
                            topdown_source="input", seed=9)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys: nope"):
        config_parse('{"nope": 1}')


def test_config_rejects_non_object():
    with pytest.raises(ConfigError):
        config_parse("[1, 2]")
    with pytest.raises(ConfigError):
        config_parse("{not json")


def test_config_type_guards():
    with pytest.raises(ConfigError, match="must be an integer"):
        config_parse('{"heads": true}')
    with pytest.raises(ConfigError, match="must be an integer"):
        config_parse('{"seed": "7"}')
    with pytest.raises(ConfigError, match="must be a boolean"):
        config_parse('{"cfe_enabled": 1}')
    with pytest.raises(ConfigError, match="must be a string"):
        config_parse('{"activation": 0}')
    with pytest.raises(ConfigError, match="must be a number"):
        config_parse('{"epsilon": "small"}')


@pytest.mark.parametrize("overrides,rule", [
    ({"regions_s": 0}, "regions_s >= 1"),
    ({"topk_k": 0}, "topk_k >= 1"),
    ({"regions_s": 2, "topk_k": 5}, "topk_k <= regions_s"),
    ({"heads": 0}, "heads >= 1"),
    ({"fusion_width": 0}, "fusion_width >= 3"),
    ({"fusion_width": 10}, "fusion_width % 3"),
    ({"fusion_width": 9, "heads": 2}, "heads divides fusion_width"),
    ({"epsilon": -1.0}, "epsilon >= 0"),
    ({"dilation": 0}, "dilation >= 1"),
    ({"lce_kernel": 4}, "lce_kernel odd"),
    ({"activation": "gelu"}, "activation in"),
    ({"topdown_source": "sideways"}, "topdown_source in"),
    ({"seed": -1}, "seed fits"),
])
def test_config_invariants_enforced(overrides, rule):
    with pytest.raises(ConfigError, match=rule):
        config_parse(json.dumps(overrides))


def test_validate_accepts_defaults():
    assert config_validate(RunConfig()) == RunConfig()


# -- padding and cropping ------------------------------------------------

@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_pad_makes_extents_divisible(c, h, w, s):
    x = T.Rng(c * 1000 + h * 100 + w * 10 + s).tensor([c, h, w], -1.0, 1.0)
    padded = pad_to_multiple(x, s)
    _, ph, pw = arr(padded).shape
    assert ph % s == 0 and pw % s == 0
    assert ph - h < s and pw - w < s
    assert np.array_equal(arr(padded)[:, :h, :w], arr(x))
    assert np.all(arr(padded)[:, h:, :] == 0.0)
    assert np.all(arr(padded)[:, :, w:] == 0.0)


def test_pad_noop_when_already_divisible():
    x = T.Rng(6).tensor([2, 4, 6], -1.0, 1.0)
    assert pad_to_multiple(x, 2) is x


def test_crop_inverts_pad():
    x = T.Rng(7).tensor([2, 5, 7], -1.0, 1.0)
    assert np.array_equal(arr(crop(pad_to_multiple(x, 4), 5, 7)), arr(x))


def test_crop_range_checked():
    x = T.zeros([1, 4, 4])
    with pytest.raises(ConfigError):
        crop(x, 5, 4)
    with pytest.raises(ConfigError):
        crop(x, 0, 4)


# -- fixture generation --------------------------------------------------

def test_fixture_dims_and_manifest(fixture_dir):
    maps, manifest = load_fixture(fixture_dir)
    assert sorted(manifest.keys()) == ["files", "seed"]
    assert manifest["seed"] == 0
    assert [e["level"] for e in manifest["files"]] == [2, 3, 4, 5]
    for lvl, dims in FIXTURE_DIMS.items():
        assert maps[lvl].dims == dims
        va = maps[lvl].array
        assert va.min() > -1.0 and va.max() < 1.0


def test_fixture_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    gen_fixture(3, a)
    gen_fixture(3, b)
    for name in ("backbone_c2.tnsr", "backbone_c5.tnsr", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    gen_fixture(4, b)
    assert (a / "backbone_c2.tnsr").read_bytes() != (b / "backbone_c2.tnsr").read_bytes()


def test_load_backbone_needs_no_manifest(tmp_path):
    gen_fixture(1, tmp_path)
    (tmp_path / "manifest.json").unlink()
    maps = load_backbone(tmp_path)
    assert sorted(maps.keys()) == [2, 3, 4, 5]


def test_load_backbone_names_missing_file(tmp_path):
    gen_fixture(1, tmp_path)
    (tmp_path / "backbone_c3.tnsr").unlink()
    with pytest.raises(FormatError, match="backbone_c3.tnsr"):
        load_backbone(tmp_path)


def test_load_fixture_requires_manifest(tmp_path):
    with pytest.raises(FormatError, match="manifest.json"):
        load_fixture(tmp_path)
