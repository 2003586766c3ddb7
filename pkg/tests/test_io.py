import os
import struct

import numpy as np
import pytest

from maskattn.checkpoint import (MAGIC, BadMagicError, Checkpoint, CheckpointError, TruncatedPayloadError,
                                 VersionMismatchError, decode, encode, read_checkpoint, write_checkpoint)
from maskattn.config import (ConfigError, RunConfig, dump_config, load_config, parse_config, replace)
from maskattn.experiment import build_model, model_checkpoint, restore
from maskattn.imageio import read_pgm, read_ppm, to_uint8, write_pgm, write_ppm
from maskattn.optim import AdamWState

SMALL = dict(latent_size=8, base_channels=4, d_model=8, n_sites=1, backbone_steps=4, gate_steps=4,
             warmup_steps=1)


def random_ckpt(seed=0):
    rng = np.random.default_rng(seed)
    tensors = {"a.w": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 5e-324]),
               "adamw.m/a.w": rng.normal(size=(3, 4))}
    return Checkpoint(config_text=dump_config(RunConfig()), phase="backbone", step=7, tensors=tensors,
                      optim_step=7)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        ck = random_ckpt()
        p = tmp_path / "x.ckpt"
        write_checkpoint(p, ck)
        back = read_checkpoint(p)
        assert back == ck
        assert np.signbit(back.tensors["b"][1])
        assert encode(back) == encode(ck)

    def test_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        write_checkpoint(p, random_ckpt())
        assert p.read_bytes()[:8] == b"MASKATN1" == MAGIC

    def test_every_truncation_is_detected(self):
        data = encode(random_ckpt())
        with pytest.raises(TruncatedPayloadError):
            decode(data[:-1])
        for cut in range(8, len(data), 37):
            with pytest.raises(TruncatedPayloadError):
                decode(data[:cut])

    def test_bad_magic_and_version(self):
        data = bytearray(encode(random_ckpt()))
        with pytest.raises(BadMagicError):
            decode(b"NOTMAGIC" + bytes(data[8:]))
        data[8:12] = struct.pack("<I", 99)
        with pytest.raises(VersionMismatchError):
            decode(bytes(data))

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError):
            decode(encode(random_ckpt()) + b"\0")

    def test_distinct_error_kinds(self):
        kinds = {BadMagicError, VersionMismatchError, TruncatedPayloadError}
        assert len(kinds) == 3 and all(issubclass(k, CheckpointError) for k in kinds)

    def test_model_round_trip(self, tmp_path):
        cfg = replace(RunConfig(), **SMALL)
        model = build_model(cfg)
        rng = np.random.default_rng(1)
        for t in model.params.values():
            t.data[...] = rng.normal(size=t.shape)
        state = AdamWState(step=3, m={n: rng.normal(size=t.shape) for n, t in model.params.items()},
                           v={n: rng.random(t.shape) for n, t in model.params.items()})
        ck = model_checkpoint(cfg, model, "gates", 3, state)
        write_checkpoint(tmp_path / "m.ckpt", ck)
        cfg2, model2, state2 = restore(read_checkpoint(tmp_path / "m.ckpt"))
        assert cfg2 == cfg
        for n, t in model.params.items():
            assert t.data.tobytes() == model2.params[n].data.tobytes()
            assert state.m[n].tobytes() == state2.m[n].tobytes()
            assert state.v[n].tobytes() == state2.v[n].tobytes()
        assert state2.step == 3


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = RunConfig()
        assert parse_config(dump_config(cfg)) == cfg
        assert load_config(None) == cfg

    def test_parse_values(self):
        cfg = parse_config("seed: 3\nlr_peak: 2e-4\nsampler: ddpm\n")
        assert (cfg.seed, cfg.lr_peak, cfg.sampler) == (3, 2e-4, "ddpm")

    @pytest.mark.parametrize("text", [
        "learning_rate: 1e-4\n",          # unknown key
        "seed: 1.5\n",                    # not an integer
        "lr_peak: fast\n",               # not a number
        "seed: [1, 2]\n",                 # not flat
        "sampler: euler\n",
        "warmup_steps: 5000\n",
        "holdout_fraction: 1.0\n",
        "d_model: 63\n",                  # not divisible by the head count
        ": :\n",
    ])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_env_overrides_out_dir(self, monkeypatch):
        monkeypatch.setenv("MASKATTN_OUT", "/tmp/elsewhere")
        assert RunConfig().output_dir() == "/tmp/elsewhere"
        monkeypatch.delenv("MASKATTN_OUT")
        assert RunConfig(out_dir="x").output_dir() == "x"


class TestImages:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).random((3, 5, 7))
        write_ppm(tmp_path / "a.ppm", img)
        raw = (tmp_path / "a.ppm").read_bytes()
        assert raw.startswith(b"P6\n7 5\n255\n")
        assert np.array_equal(read_ppm(tmp_path / "a.ppm"), to_uint8(img).transpose(1, 2, 0))

    def test_ppm_scale(self, tmp_path):
        img = np.random.default_rng(1).random((3, 2, 2))
        write_ppm(tmp_path / "a.ppm", img, scale=3)
        assert read_ppm(tmp_path / "a.ppm").shape == (6, 6, 3)

    def test_clamping(self):
        assert to_uint8(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])).tolist() == [0, 0, 128, 255, 255]

    def test_pgm_round_trip(self, tmp_path):
        arr = np.array([[0, 255, 0], [255, 255, 0]], dtype=np.uint8)
        write_pgm(tmp_path / "m.pgm", arr)
        assert (tmp_path / "m.pgm").read_bytes() == b"P5\n3 2\n255\n" + arr.tobytes()
        assert np.array_equal(read_pgm(tmp_path / "m.pgm"), arr)

    def test_reader_rejects_wrong_kind(self, tmp_path):
        write_pgm(tmp_path / "m.pgm", np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "m.pgm")
        (tmp_path / "cut.ppm").write_bytes(b"P6\n4")
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "cut.ppm")
        (tmp_path / "short.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(11))
        with pytest.raises(ValueError):
            read_ppm(tmp_path / "short.ppm")
