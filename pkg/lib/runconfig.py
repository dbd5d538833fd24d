"""Declarative experiment configuration.

One JSON document describes a whole experiment. Loading merges the built-in
defaults underneath the file's values and then freezes the schema, so a
misspelled key or a value of the wrong type fails loudly instead of silently
falling back to a default.

Example::

    from runconfig import RunConfig

    config = RunConfig.load("experiment.json")  # Missing file -> pure defaults.
    config["train"]["steps"] = 500  # Allowed, same type.
    config["train"]["stpes"] = 500  # FrozenError: unknown key.
    config.save("runs/exp/config.json")  # Sorted keys, atomic write.

    spec = config.corpus_spec()
    model = config.model_config(vocab_size=spec.vocab_size, feature_dim=spec.feature_dim)
"""

import json
import logging
import os
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
from corpus import CorpusSpec
from decoding import FusionConfig, LMConfig
from losses import Mode, ObjectiveSpec, UpsampleMaskConfig
from models import ModelConfig, Variant
from training import TrainConfig

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Unreadable or inconsistent run configuration."""


class FrozenError(ConfigError):
    """Invalid operation on a frozen config node."""


def _corpus_defaults():
    d = CorpusSpec().to_dict()
    del d["seed"]
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _lm_defaults():
    d = asdict(LMConfig())
    del d["seed"]
    return d


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "out_dir": "runs/default",
    "corpus": _corpus_defaults(),
    "model": {
        "variant": "mhat",
        "encoder_dim": 16,
        "encoder_layers": 2,
        "label_decoder": {"kind": "recurrent", "layers": 1, "width": 16, "embed_dim": 16},
        # Only the entry matching ``variant`` is used.
        "blank_decoder_dim": 8,
        "joint_dim": 16,
        "text_encoder": {"layers": 1, "injection_layer": 1},
    },
    "train": {
        "paired_batch_size": 16,
        "unpaired_batch_size": 128,
        "joist_batch_size": 16,
        "steps": 1000,
        "learning_rate": 3e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "grad_clip": 5.0,
        "warmup_steps": 0,
        "alternate_updates": False,
        "eval_every": 200,
        "eval_utterances": 40,
        "eval_beam": 1,
        "log_every": 10,
        "smoothing_window": 20,
        "ilma_steps": 1000,
        # MHAT keeps improving well past the point where HAT adaptation overfits.
        "mhat_ilma_steps": 2000,
    },
    "objective": {
        "ilmt": {"beta": 0.1},
        "jeit": {"beta_hat": 0.2, "beta_mhat": 4.0},
        "joist": {"alpha": 0.25},
        "cjjt": {"alpha": 0.25, "beta": 1.5},
        "ilma": {"kld_weight": 0.5},
        "upsample": {"repeat_policy": "fixed", "k": 2, "k_min": 1, "k_max": 3, "mask_prob": 0.15},
    },
    "fusion": {
        "lambda_lm": 0.3,
        "lambda_ilm": 0.1,
        "beam_width": 4,
        "max_symbols_per_frame": 4,
        "sweep_lambda_lm": [0.0, 0.1, 0.3, 0.5],
        "sweep_lambda_ilm": [0.0, 0.05, 0.1, 0.2],
    },
    "lm": _lm_defaults(),
    "pipeline": {
        "modes": ["base", "jeit", "joist", "cjjt"],
        "ilma_variants": ["hat", "mhat"],
        "ilma_kld_weight": 0.0,
        "fusion_mode": "cjjt",
    },
}


def _compatible(old, new):
    """Frozen nodes accept same-typed replacements; ints widen to floats."""
    if isinstance(old, bool) or isinstance(new, bool):
        return isinstance(old, bool) and isinstance(new, bool)
    if isinstance(old, float):
        return isinstance(new, (int, float))
    return isinstance(new, type(old))


class Node:
    def __init__(self, path=""):
        self.path = path
        self.frozen = False

    def __repr__(self):
        return repr(self.to_data())

    def __len__(self):
        return len(self.data)

    def __contains__(self, value):
        return value in self.data

    def __iter__(self):
        yield from self.data

    def __getitem__(self, key):
        return self.data[key]

    def __eq__(self, other):
        if isinstance(other, Node):
            return self.to_data() == other.to_data()
        return self.to_data() == other

    def _where(self, key):
        return f"{self.path}.{key}" if self.path else str(key)

    def _wrap(self, key, value):
        if isinstance(value, Node):
            value = value.to_data()
        child_path = self._where(key)
        if isinstance(value, dict):
            return ConfigDict(value, path=child_path)
        if isinstance(value, (list, tuple)):
            return ConfigList(value, path=child_path)
        if value is None or isinstance(value, (bool, int, float, str)):
            return value
        raise ConfigError(f"{child_path}: unsupported value type {type(value).__name__}")

    def _check_replace(self, key, old, new):
        if not self.frozen:
            return
        if isinstance(old, Node) or isinstance(new, (dict, list, tuple, Node)):
            if not isinstance(old, Node) or not isinstance(new, (dict, list, tuple, Node)):
                raise FrozenError(f"{self._where(key)}: cannot change node structure")
            return
        if old is not None and not _compatible(old, new):
            raise FrozenError(
                f"{self._where(key)}: expected {type(old).__name__}, got {type(new).__name__} ({new!r})"
            )

    def freeze_schema(self, recursive=True):
        """Reject new keys and type changes from now on."""
        self.frozen = True
        if recursive:
            for child in self.children():
                child.freeze_schema(recursive=recursive)

    def children(self):
        values = self.data.values() if isinstance(self.data, dict) else self.data
        return [v for v in values if isinstance(v, Node)]


class ConfigList(Node):
    def __init__(self, values=(), path=""):
        super().__init__(path)
        self.data = [self._wrap(i, v) for i, v in enumerate(values)]

    def __setitem__(self, index, value):
        self._check_replace(index, self.data[index], value)
        self.data[index] = self._wrap(index, value)

    def append(self, value):
        if self.frozen and self.data and not _compatible(self.data[0], value):
            raise FrozenError(f"{self.path}: list items must be {type(self.data[0]).__name__}")
        self.data.append(self._wrap(len(self.data), value))

    def to_data(self):
        return [v.to_data() if isinstance(v, Node) else v for v in self.data]


class ConfigDict(Node):
    def __init__(self, values=None, path=""):
        super().__init__(path)
        self.data = {k: self._wrap(k, v) for k, v in (values or {}).items()}

    def keys(self):
        return self.data.keys()

    def items(self):
        return self.data.items()

    def get(self, key, default=None):
        return self.data.get(key, default)

    def __setitem__(self, key, value):
        if not isinstance(key, str):
            raise ConfigError(f"{self.path}: keys must be strings, got {key!r}")
        if key not in self.data:
            if self.frozen:
                raise FrozenError(f"Unknown config key {self._where(key)!r}")
        else:
            self._check_replace(key, self.data[key], value)
            if isinstance(self.data[key], ConfigList) and isinstance(value, (list, tuple)):
                # Lists are whole-value settings (e.g. sweep grids); check item types.
                template = self.data[key].to_data()
                for item in value:
                    if template and not _compatible(template[0], item):
                        raise FrozenError(f"{self._where(key)}: list items must be {type(template[0]).__name__}")
        self.data[key] = self._wrap(key, value)
        if self.frozen and isinstance(self.data[key], Node):
            self.data[key].freeze_schema()

    def update(self, d):
        """Overwrite (possibly) existing entries with contents of ``d``, recursing into dicts."""
        for k, v in d.items():
            if isinstance(v, dict) and isinstance(self.data.get(k), ConfigDict):
                self.data[k].update(v)
            else:
                self[k] = v

    def merge(self, defaults):
        """Recursively add entries of ``defaults`` missing from ``self``."""
        for key, value in defaults.items():
            if key not in self.data:
                self[key] = value
            elif isinstance(value, dict):
                existing = self.data[key]
                if not isinstance(existing, ConfigDict):
                    raise ConfigError(f"{existing.path if isinstance(existing, Node) else key}: expected a mapping")
                existing.merge(value)

    def to_data(self):
        return {k: v.to_data() if isinstance(v, Node) else v for k, v in self.data.items()}


def _check_types(node, defaults, path=""):
    """Values read from a file must match the default types (ints widen to floats)."""
    for key, default in defaults.items():
        where = f"{path}.{key}" if path else key
        value = node[key]
        if isinstance(default, dict):
            _check_types(value, default, where)
        elif isinstance(default, list):
            if not isinstance(value, ConfigList):
                raise ConfigError(f"{where}: expected a list")
            if default:
                for item in value.to_data():
                    if not _compatible(default[0], item):
                        raise ConfigError(f"{where}: list items must be {type(default[0]).__name__}")
        elif not _compatible(default, value):
            raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    unknown = sorted(set(node.keys()) - set(defaults))
    if unknown:
        raise ConfigError(f"Unknown config keys under {path or 'root'!r}: {unknown}")


class RunConfig(ConfigDict):
    def __init__(self, data=None):
        """Merged, schema-frozen experiment configuration.

        Parameters
        ----------
        data: Optional[dict]
            Values overriding ``DEFAULTS``.

        Raises
        ------
        ConfigError
            Unknown keys, wrong value types or an unsupported ``schema_version``.
        """
        super().__init__(data or {})
        self.merge(DEFAULTS)
        if self["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version {self['schema_version']}; expected {SCHEMA_VERSION}")
        _check_types(self, DEFAULTS)
        self.freeze_schema()

    @classmethod
    def load(cls, path=None):
        """Read ``path`` (pure defaults when ``None``)."""
        if path is None:
            return cls()
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must hold a JSON object")
        log.debug("Loaded config %s", path)
        return cls(data)

    def dumps(self):
        return json.dumps(self.to_data(), sort_keys=True, indent=2) + "\n"

    def save(self, path):
        """Atomic (or as atomic as you're going to get) file-write."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.dumps())
        os.replace(tmp, path)

    def override_seed(self, seed):
        self["seed"] = int(seed)
        return self

    def sub_seed(self, name):
        """Deterministic 31-bit seed for stream ``name`` derived from the top-level seed."""
        rng = np.random.default_rng([self["seed"], zlib.crc32(name.encode())])
        return int(rng.integers(2**31))

    ##################
    # Typed sections #
    ##################
    def _build(self, section, factory, **kwargs):
        try:
            return factory(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid {section} section: {e}")

    def corpus_spec(self):
        return self._build("corpus", CorpusSpec, **self["corpus"].to_data(), seed=self.sub_seed("corpus"))

    def model_config(self, vocab_size, feature_dim, variant=None):
        m = self["model"].to_data()
        try:
            variant = Variant(variant or m["variant"])
        except ValueError:
            raise ConfigError(f"Invalid model section: unknown variant {variant or m['variant']!r}")
        return self._build(
            "model",
            ModelConfig,
            variant=variant,
            vocab_size=vocab_size,
            feature_dim=feature_dim,
            encoder_dim=m["encoder_dim"],
            encoder_layers=m["encoder_layers"],
            label_decoder=m["label_decoder"],
            blank_decoder_dim=m["blank_decoder_dim"] if variant is Variant.MHAT else None,
            joint_dim=m["joint_dim"] if variant is Variant.HAT else None,
            text_encoder=m["text_encoder"],
        )

    def objective(self, mode, variant=None, kld_weight=None):
        mode = Mode(mode)
        variant = Variant(variant or self["model"]["variant"])
        o = self["objective"].to_data()
        weights = dict(o.get(mode.value, {}))
        if mode is Mode.JEIT:
            weights = {"beta": weights[f"beta_{variant.value}"]}
        if mode is Mode.ILMA and kld_weight is not None:
            weights["kld_weight"] = float(kld_weight)
        upsample = self._build("objective.upsample", UpsampleMaskConfig, **o["upsample"], rng_seed=self.sub_seed("mask"))
        return self._build("objective", ObjectiveSpec, mode=mode, upsample=upsample, **weights)

    def train_config(self, mode, variant=None, kld_weight=None, steps=None):
        t = self["train"].to_data()
        ilma_steps = {Variant.HAT: t.pop("ilma_steps"), Variant.MHAT: t.pop("mhat_ilma_steps")}
        objective = self.objective(mode, variant, kld_weight)
        if steps is None and objective.mode is Mode.ILMA:
            steps = ilma_steps[Variant(variant or self["model"]["variant"])]
        elif steps is None:
            steps = t["steps"]
        t["steps"] = steps
        return self._build("train", TrainConfig, objective=objective, seed=self.sub_seed("train"), **t)

    def fusion_config(self, lambda_lm=None, lambda_ilm=None, beam_width=None):
        f = self["fusion"].to_data()
        return self._build(
            "fusion",
            FusionConfig,
            lambda_lm=f["lambda_lm"] if lambda_lm is None else lambda_lm,
            lambda_ilm=f["lambda_ilm"] if lambda_ilm is None else lambda_ilm,
            beam_width=f["beam_width"] if beam_width is None else beam_width,
            max_symbols_per_frame=f["max_symbols_per_frame"],
        )

    def sweep_grid(self):
        f = self["fusion"]
        return f["sweep_lambda_lm"].to_data(), f["sweep_lambda_ilm"].to_data()

    def lm_config(self):
        return self._build("lm", LMConfig, **self["lm"].to_data(), seed=self.sub_seed("lm"))

    def init_seed(self, variant):
        return self.sub_seed(f"init/{Variant(variant).value}")
