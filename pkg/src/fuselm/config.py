"""Flat key=value run configuration with sections, file + override parsing.

Every field has a default; commands echo the effective configuration next to
their outputs so any run is reproducible from its artifacts.
"""
from __future__ import annotations

import configparser
import io

from .encoder import SynthSpec
from .model import ModelConfig
from .slm import ALPHABET, LMConfig, Vocab
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "synth": {
        "layers": "8",
        "frames": "24",
        "width": "32",
        "content_layer": "8",
        "paralinguistic_layer": "3",
        "noise": "0.1",
        "vocab": "30",
        "emotions": "4",
        "len_min": "3",
        "len_max": "8",
        "codebook_seed": "1308",
    },
    "model": {
        "blocks": "4",
        "width": "64",
        "heads": "4",
        "ffn": "256",
        "prompt_len": "1",
        "beta": "0.5",
        "nonlinearity": "gelu",
        "encoder_mode": "gated",
        "fixed_layer": "8",
        "fusion_mode": "dynamic",
        "max_len": "512",
        "init_seed": "0",
    },
    "data": {
        "n_asr": "200",
        "n_ser": "200",
        "val_frac": "0.1",
        "seed": "0",
        "inline": "false",
        "train_manifest": "",
        "val_manifest": "",
    },
    "train": {
        "epochs": "20",
        "batch_size": "16",
        "peak_lr": "0.001",
        "warmup": "200",
        "horizon": "0",
        "accumulation": "4",
        "ratio": "1",
        "seed": "0",
        "val_every": "50",
        "max_steps": "0",
        "clip_norm": "0",
    },
    "eval": {
        "max_decode_len": "16",
    },
}


class RunConfig:
    def __init__(self):
        self._values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser()
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except OSError as e:
                raise ConfigError(f"cannot read config file: {e}") from None
            except configparser.Error as e:
                raise ConfigError(f"malformed config file: {e}") from None
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(section, key, value)
        for item in overrides:
            cfg.set_override(item)
        return cfg

    def set(self, section: str, key: str, value: str) -> None:
        if section not in self._values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self._values[section]:
            raise ConfigError(f"unknown config field {section}.{key}")
        self._values[section][key] = str(value)

    def set_override(self, item: str) -> None:
        head, sep, value = item.partition("=")
        if not sep or "." not in head:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        section, _, key = head.partition(".")
        self.set(section.strip(), key.strip(), value)

    def get(self, section: str, key: str) -> str:
        try:
            return self._values[section][key]
        except KeyError:
            raise ConfigError(f"unknown config field {section}.{key}") from None

    def get_int(self, section, key) -> int:
        raw = self.get(section, key)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected integer, got {raw!r}") from None

    def get_float(self, section, key) -> float:
        raw = self.get(section, key)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected number, got {raw!r}") from None

    def get_bool(self, section, key) -> bool:
        raw = self.get(section, key).lower()
        if raw in ("true", "1", "yes", "on"):
            return True
        if raw in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{section}.{key}: expected boolean, got {raw!r}")

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        for section, keys in self._values.items():
            parser[section] = keys
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    # ---- typed builders ----

    def synth_spec(self) -> SynthSpec:
        try:
            return SynthSpec(
                n_layers=self.get_int("synth", "layers"),
                n_frames=self.get_int("synth", "frames"),
                width=self.get_int("synth", "width"),
                content_layer=self.get_int("synth", "content_layer"),
                paralinguistic_layer=self.get_int("synth", "paralinguistic_layer"),
                noise=self.get_float("synth", "noise"),
                vocab=self.get_int("synth", "vocab"),
                n_emotions=self.get_int("synth", "emotions"),
                len_min=self.get_int("synth", "len_min"),
                len_max=self.get_int("synth", "len_max"),
                codebook_seed=self.get_int("synth", "codebook_seed"),
            )
        except ValueError as e:
            raise ConfigError(f"synth: {e}") from None

    def vocab(self) -> Vocab:
        n = self.get_int("synth", "vocab")
        if not 1 <= n <= len(ALPHABET):
            raise ConfigError(f"synth.vocab: must be in 1..{len(ALPHABET)}")
        return Vocab(ALPHABET[:n], prompt_len=self.get_int("model", "prompt_len"))

    def model_config(self) -> ModelConfig:
        try:
            lm = LMConfig(
                n_blocks=self.get_int("model", "blocks"),
                d=self.get_int("model", "width"),
                heads=self.get_int("model", "heads"),
                ffn=self.get_int("model", "ffn"),
                nonlinearity=self.get("model", "nonlinearity"),
                max_len=self.get_int("model", "max_len"),
            )
            return ModelConfig(
                n_encoder_layers=self.get_int("synth", "layers"),
                speech_width=self.get_int("synth", "width"),
                lm=lm,
                n_emotions=self.get_int("synth", "emotions"),
                prompt_len=self.get_int("model", "prompt_len"),
                beta=self.get_float("model", "beta"),
                encoder_mode=self.get("model", "encoder_mode"),
                fixed_layer=self.get_int("model", "fixed_layer"),
                fusion_mode=self.get("model", "fusion_mode"),
            )
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self.get_int("train", "epochs"),
                batch_size=self.get_int("train", "batch_size"),
                peak_lr=self.get_float("train", "peak_lr"),
                warmup_steps=self.get_int("train", "warmup"),
                decay_horizon=self.get_int("train", "horizon"),
                accumulation=self.get_int("train", "accumulation"),
                interleave_ratio=self.get_int("train", "ratio"),
                seed=self.get_int("train", "seed"),
                val_every=self.get_int("train", "val_every"),
                max_steps=self.get_int("train", "max_steps"),
                clip_norm=self.get_float("train", "clip_norm"),
            )
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None
