"""Synthetic paired/unpaired corpus with rare-word test sets.

Sentences come from per-domain carrier templates with one entity slot.
Domain 0 ("vs") only ever uses frequent entities. Each of the four rare-word
domains additionally owns a list of rare entities. A rare entity occurs exactly
``rare_paired_occurrences`` times in the paired transcripts and at least
``rare_unpaired_min`` times in the unpaired text. Both counts are constructive
and re-checked by ``rare_word_report``.

Features are pseudo-TTS: every token has a frozen random prototype vector,
replicated for a random number of frames plus Gaussian noise.

Example::

    import corpus

    spec = corpus.CorpusSpec(paired_count=200, unpaired_count=20_000, seed=3)
    bundle = corpus.generate_corpus(spec)
    corpus.rare_word_report(bundle).raise_for_violations()
    corpus.save_corpus(bundle, "data/")
"""

import hashlib
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numerics import load_container, save_container

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DOMAIN_NAMES = ("vs", "maps", "play", "web", "yt")
RARE_DOMAINS = DOMAIN_NAMES[1:]
ENTITY = None

TEMPLATES = {
    "vs": (
        ("what", "is", ENTITY),
        ("how", "tall", "is", ENTITY),
        ("show", "me", ENTITY),
        ("weather", "in", ENTITY),
        ("who", "is", ENTITY),
    ),
    "maps": (
        ("navigate", "to", ENTITY),
        ("directions", "to", ENTITY),
        ("how", "far", "is", ENTITY),
        ("find", ENTITY, "nearby"),
    ),
    "play": (
        ("play", ENTITY),
        ("play", "songs", "by", ENTITY),
        ("listen", "to", ENTITY),
        ("shuffle", ENTITY),
    ),
    "web": (
        ("search", "for", ENTITY),
        ("open", ENTITY),
        ("look", "up", ENTITY),
        ("what", "is", ENTITY, "about"),
    ),
    "yt": (
        ("watch", ENTITY),
        ("show", "me", "videos", "of", ENTITY),
        ("play", ENTITY, "video"),
        ("stream", ENTITY),
    ),
}

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class CorpusError(ValueError):
    """Corpus spec cannot be realized."""


class AuditError(CorpusError):
    def __init__(self, message, words=()):
        """Count audit failed.

        Parameters
        ----------
        message: str
        words: Iterable[str]
            Offending words.
        """
        super().__init__(message)
        self.words = tuple(words)


class ManifestError(CorpusError):
    """On-disk corpus is corrupted or of another version."""


@dataclass(frozen=True)
class CorpusSpec:
    paired_count: int = 2000
    unpaired_count: int = 200_000
    frequent_per_domain: int = 8
    rare_per_domain: int = 6
    paired_domain_weights: tuple = (0.6, 0.1, 0.1, 0.1, 0.1)
    unpaired_domain_weights: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)
    unpaired_rare_prob: float = 0.3
    rare_word_threshold: int = 5
    rare_paired_occurrences: int = 2
    rare_unpaired_min: int = 50
    base_test_count: int = 200
    rare_test_count: int = 60
    heldout_text_count: int = 2000
    feature_dim: int = 16
    frames_per_token: tuple = (2, 3)
    noise_level: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("paired_domain_weights", "unpaired_domain_weights", "frames_per_token"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("paired_domain_weights", "unpaired_domain_weights"):
            weights = getattr(self, name)
            if len(weights) != len(DOMAIN_NAMES) or min(weights) < 0 or sum(weights) <= 0:
                raise CorpusError(f"{name} must be {len(DOMAIN_NAMES)} non-negative weights")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise CorpusError(f"frames_per_token must satisfy 1 <= min <= max, got {self.frames_per_token}")
        if self.noise_level < 0:
            raise CorpusError("noise_level must be >= 0")
        if self.feature_dim < 1 or self.frequent_per_domain < 1 or self.rare_per_domain < 1:
            raise CorpusError("feature_dim, frequent_per_domain and rare_per_domain must be >= 1")
        if not 0 <= self.unpaired_rare_prob <= 1:
            raise CorpusError("unpaired_rare_prob must be in [0, 1]")
        if self.rare_paired_occurrences >= self.rare_word_threshold:
            raise CorpusError(
                f"rare_paired_occurrences={self.rare_paired_occurrences} must stay below "
                f"rare_word_threshold={self.rare_word_threshold}"
            )

    @property
    def rare_total(self):
        return self.rare_per_domain * len(RARE_DOMAINS)

    @property
    def vocab_size(self):
        return len(carrier_words()) + self.frequent_per_domain * len(DOMAIN_NAMES) + self.rare_total

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Utterance:
    features: np.ndarray
    transcript: np.ndarray
    domain_id: int
    uid: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.transcript = np.asarray(self.transcript, dtype=np.int64)
        T = len(self.features)
        if T < 1 or T < len(self.transcript):
            raise CorpusError(f"utterance {self.uid!r}: {T} frames cannot carry {len(self.transcript)} tokens")


@dataclass
class Vocabulary:
    """Word inventory; ids are positions in ``words``."""

    words: list
    frequent: dict = field(default_factory=dict)
    rare: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, words):
        try:
            return np.array([self.index[w] for w in words], dtype=np.int64)
        except KeyError as e:
            raise CorpusError(f"Unknown word {e.args[0]!r}")

    def decode(self, ids):
        return [self.words[int(i)] for i in ids]

    def rare_ids(self):
        return {w: self.index[w] for domain in RARE_DOMAINS for w in self.rare.get(domain, ())}


@dataclass
class SplitBundle:
    spec: CorpusSpec
    vocab: Vocabulary
    paired_train: list
    unpaired_text: list
    base_test: list
    rare_tests: dict
    heldout_text: list

    def test_sets(self):
        """``{"vs": base_test, "maps": ..., ...}`` in report column order."""
        return {"vs": self.base_test, **{d: self.rare_tests[d] for d in RARE_DOMAINS}}


@lru_cache
def carrier_words():
    words = []
    for domain in DOMAIN_NAMES:
        for template in TEMPLATES[domain]:
            for w in template:
                if w is not ENTITY and w not in words:
                    words.append(w)
    return tuple(words)


def _rng(seed, stream, *extra):
    return np.random.default_rng([seed, zlib.crc32(stream.encode()), *extra])


def _entity_names(count, rng, taken):
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    names = []
    seen = set(taken)
    attempts = 0
    while len(names) < count:
        attempts += 1
        if attempts > 100 * count + 1000:
            raise CorpusError(f"cannot generate {count} distinct entity names")
        n = rng.integers(2, 4)
        name = "".join(syllables[i] for i in rng.integers(0, len(syllables), size=n))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def build_vocabulary(spec):
    """Carrier words, then frequent entities per domain, then rare entities per rare domain.

    Raises
    ------
    CorpusError
        Not enough distinct entity names.
    """
    carriers = list(carrier_words())
    per_domain = spec.frequent_per_domain
    names = _entity_names(per_domain * len(DOMAIN_NAMES) + spec.rare_total, _rng(spec.seed, "vocab"), carriers)
    frequent = {d: names[i * per_domain : (i + 1) * per_domain] for i, d in enumerate(DOMAIN_NAMES)}
    offset = per_domain * len(DOMAIN_NAMES)
    rare = {
        d: names[offset + i * spec.rare_per_domain : offset + (i + 1) * spec.rare_per_domain]
        for i, d in enumerate(RARE_DOMAINS)
    }
    return Vocabulary(carriers + names, frequent, rare)


def _sentence(vocab, domain, template_index, entity):
    template = TEMPLATES[domain][template_index]
    return vocab.encode([entity if w is ENTITY else w for w in template])


def _sample_sentences(vocab, rng, count, weights, rare_prob, forced=()):
    """``forced`` entries ``(domain, entity)`` come first; the rest is sampled."""
    weights = np.asarray(weights, dtype=np.float64) / np.sum(weights)
    plan = list(forced)
    domains = rng.choice(len(DOMAIN_NAMES), size=count - len(plan), p=weights)
    use_rare = rng.random(len(domains)) < rare_prob
    for d, rare in zip(domains, use_rare):
        name = DOMAIN_NAMES[d]
        pool = vocab.rare[name] if rare and name in vocab.rare else vocab.frequent[name]
        plan.append((name, pool[rng.integers(len(pool))]))

    sentences = []
    for name, entity in plan:
        sentences.append((name, _sentence(vocab, name, rng.integers(len(TEMPLATES[name])), entity)))
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


@lru_cache(maxsize=8)
def token_prototypes(spec):
    """Frozen ``(vocab_size, feature_dim)`` prototype matrix for ``spec``."""
    return _rng(spec.seed, "prototypes").normal(size=(spec.vocab_size, spec.feature_dim))


def synthesize_features(transcript, spec, seed):
    """Pseudo-TTS features for ``transcript``.

    Token ``y`` emits ``k`` frames (``k`` uniform in ``spec.frames_per_token``);
    every one of them is an exact copy of ``prototype[y]`` plus ``N(0, noise_level**2)``.
    An empty transcript yields one noise frame.

    Parameters
    ----------
    transcript: Sequence[int]
    spec: CorpusSpec
    seed: Union[int, Sequence[int]]

    Returns
    -------
    np.ndarray
        Shape ``(T, feature_dim)`` with ``T >= max(1, len(transcript))``.
    """
    transcript = np.asarray(transcript, dtype=np.int64)
    if transcript.size and (transcript.min() < 0 or transcript.max() >= spec.vocab_size):
        raise CorpusError("synthesize_features: token outside vocabulary")
    rng = np.random.default_rng(seed)
    prototypes = token_prototypes(spec)
    lo, hi = spec.frames_per_token
    counts = rng.integers(lo, hi + 1, size=len(transcript))
    if len(transcript) == 0:
        clean = np.zeros((1, spec.feature_dim))
    else:
        clean = np.repeat(prototypes[transcript], counts, axis=0)
    return clean + rng.normal(0.0, spec.noise_level, size=clean.shape)


def _utterances(sentences, spec, split_id, prefix):
    utterances = []
    for i, (domain, tokens) in enumerate(sentences):
        features = synthesize_features(tokens, spec, [spec.seed, split_id, i])
        utterances.append(Utterance(features, tokens, DOMAIN_NAMES.index(domain), f"{prefix}-{i:06d}"))
    return utterances


def generate_corpus(spec):
    """Build every split of the corpus; deterministic in ``spec.seed``.

    Raises
    ------
    CorpusError
        Split sizes too small for the constructive rare-word placement.
    AuditError
        Count audits fail on the generated bundle.
    """
    if spec.paired_count < spec.rare_total * spec.rare_paired_occurrences:
        raise CorpusError(
            f"paired_count={spec.paired_count} cannot hold {spec.rare_total} rare words "
            f"x {spec.rare_paired_occurrences} occurrences"
        )
    if spec.unpaired_count < spec.rare_total * spec.rare_unpaired_min:
        raise CorpusError(
            f"unpaired_count={spec.unpaired_count} cannot hold {spec.rare_total} rare words "
            f"x {spec.rare_unpaired_min} occurrences"
        )

    vocab = build_vocabulary(spec)
    log.info("Vocabulary: %d words (%d rare)", len(vocab), spec.rare_total)

    rare_pairs = [(d, w) for d in RARE_DOMAINS for w in vocab.rare[d]]
    paired = _sample_sentences(
        vocab,
        _rng(spec.seed, "paired"),
        spec.paired_count,
        spec.paired_domain_weights,
        0.0,
        forced=rare_pairs * spec.rare_paired_occurrences,
    )
    unpaired = _sample_sentences(
        vocab,
        _rng(spec.seed, "unpaired"),
        spec.unpaired_count,
        spec.unpaired_domain_weights,
        spec.unpaired_rare_prob,
        forced=rare_pairs * spec.rare_unpaired_min,
    )
    heldout = _sample_sentences(
        vocab,
        _rng(spec.seed, "heldout"),
        spec.heldout_text_count,
        spec.unpaired_domain_weights,
        spec.unpaired_rare_prob,
    )

    test_rng = _rng(spec.seed, "tests")
    base = [
        ("vs", _sentence(vocab, "vs", test_rng.integers(len(TEMPLATES["vs"])), vocab.frequent["vs"][i % spec.frequent_per_domain]))
        for i in range(spec.base_test_count)
    ]
    rare_tests = {}
    for k, domain in enumerate(RARE_DOMAINS):
        words = vocab.rare[domain]
        sentences = [
            (domain, _sentence(vocab, domain, test_rng.integers(len(TEMPLATES[domain])), words[i % len(words)]))
            for i in range(spec.rare_test_count)
        ]
        rare_tests[domain] = _utterances(sentences, spec, 3 + k, domain)

    bundle = SplitBundle(
        spec=spec,
        vocab=vocab,
        paired_train=_utterances(paired, spec, 0, "train"),
        unpaired_text=[tokens for _, tokens in unpaired],
        base_test=_utterances(base, spec, 2, "vs"),
        rare_tests=rare_tests,
        heldout_text=[tokens for _, tokens in heldout],
    )
    log.info(
        "Generated %d paired / %d unpaired sentences (ratio %.0f:1)",
        len(bundle.paired_train),
        len(bundle.unpaired_text),
        len(bundle.unpaired_text) / len(bundle.paired_train),
    )
    rare_word_report(bundle).raise_for_violations()
    return bundle


################
# Count audits #
################
@dataclass
class RareWordRow:
    word: str
    domain: str
    paired: int
    unpaired: int
    ok: bool


@dataclass
class RareWordReport:
    rows: list
    violations: list

    @property
    def ok(self):
        return not self.violations

    def raise_for_violations(self):
        if self.violations:
            raise AuditError(f"rare-word audit failed for {len(self.violations)} word(s)", self.violations)

    def format(self):
        lines = [f"{'word':<12} {'domain':<6} {'paired':>7} {'unpaired':>9}  ok"]
        for row in self.rows:
            lines.append(f"{row.word:<12} {row.domain:<6} {row.paired:>7d} {row.unpaired:>9d}  {'yes' if row.ok else 'NO'}")
        return "\n".join(lines)


def _token_counts(sentences, vocab_size):
    if not sentences:
        return np.zeros(vocab_size, dtype=np.int64)
    return np.bincount(np.concatenate([np.asarray(s, dtype=np.int64) for s in sentences]), minlength=vocab_size)


def rare_word_report(bundle):
    """Per rare-test word: occurrences in paired transcripts and in unpaired text.

    A word passes when it occurs fewer than ``rare_word_threshold`` times in the
    paired transcripts, at least ``rare_unpaired_min`` times in the unpaired text,
    and is not also a frequent word.
    """
    spec, vocab = bundle.spec, bundle.vocab
    paired = _token_counts([u.transcript for u in bundle.paired_train], len(vocab))
    unpaired = _token_counts(bundle.unpaired_text, len(vocab))
    frequent = {w for words in vocab.frequent.values() for w in words}

    targets = {}
    for domain, utterances in bundle.rare_tests.items():
        for u in utterances:
            for word in vocab.decode(u.transcript):
                if word not in carrier_words():
                    targets.setdefault(word, domain)

    rows, violations = [], []
    for word, domain in targets.items():
        i = vocab.index[word]
        ok = (
            paired[i] < spec.rare_word_threshold
            and unpaired[i] >= spec.rare_unpaired_min
            and word not in frequent
        )
        rows.append(RareWordRow(word, domain, int(paired[i]), int(unpaired[i]), ok))
        if not ok:
            violations.append(word)
    return RareWordReport(rows, violations)


###########
# On disk #
###########
def _write_text(path, lines):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.writelines(line + "\n" for line in lines)
    os.replace(tmp, path)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _split_files(name):
    return f"{name}.txt", f"{name}.features"


def _save_utterances(directory, name, utterances, vocab):
    text, features = _split_files(name)
    _write_text(
        directory / text,
        (f"{u.uid}\t{u.domain_id}\t{' '.join(vocab.decode(u.transcript))}" for u in utterances),
    )
    save_container(directory / features, {u.uid: u.features for u in utterances})
    return [text, features]


def _load_utterances(directory, name, vocab):
    text, features = _split_files(name)
    arrays, _ = load_container(directory / features)
    utterances = []
    for line in (directory / text).read_text().splitlines():
        uid, domain, words = line.split("\t")
        utterances.append(Utterance(arrays[uid], vocab.encode(words.split()), int(domain), uid))
    return utterances


def save_corpus(bundle, directory):
    """Write all splits plus ``manifest.json`` (spec, file hashes, audit) to ``directory``.

    Writing the same bundle twice produces byte-identical files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab = bundle.vocab

    files = ["vocab.json"]
    with open(directory / "vocab.json.tmp", "w") as f:
        json.dump({"words": vocab.words, "frequent": vocab.frequent, "rare": vocab.rare}, f, indent=1, sort_keys=True)
    os.replace(directory / "vocab.json.tmp", directory / "vocab.json")

    for name, sentences in (("unpaired", bundle.unpaired_text), ("heldout", bundle.heldout_text)):
        _write_text(directory / f"{name}.txt", (" ".join(vocab.decode(s)) for s in sentences))
        files.append(f"{name}.txt")
    files += _save_utterances(directory, "paired_train", bundle.paired_train, vocab)
    for name, utterances in bundle.test_sets().items():
        files += _save_utterances(directory, f"test_{name}", utterances, vocab)

    report = rare_word_report(bundle)
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": bundle.spec.to_dict(),
        "files": {name: _sha256(directory / name) for name in sorted(files)},
        "audit": {"ok": report.ok, "violations": report.violations},
    }
    with open(directory / "manifest.json.tmp", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    os.replace(directory / "manifest.json.tmp", directory / "manifest.json")
    log.info("Saved corpus to %s", directory)
    return report


def read_manifest(directory):
    """Parse and verify ``manifest.json`` against the files next to it.

    Raises
    ------
    ManifestError
        Missing/corrupted manifest, unknown version, or file hash mismatch.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise ManifestError(f"{directory}: no manifest.json")
    except json.JSONDecodeError as e:
        raise ManifestError(f"{directory}: corrupted manifest ({e})")
    if not isinstance(manifest, dict) or manifest.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{directory}: unsupported manifest version {manifest.get('version') if isinstance(manifest, dict) else None}")
    try:
        files = manifest["files"]
        CorpusSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError) as e:
        raise ManifestError(f"{directory}: manifest is missing {e}")
    for name, digest in files.items():
        path = directory / name
        if not path.exists():
            raise ManifestError(f"{directory}: missing {name}")
        if _sha256(path) != digest:
            raise ManifestError(f"{directory}: {name} does not match its manifest hash")
    return manifest


def load_corpus(directory):
    """Inverse of ``save_corpus``; verifies the manifest first."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    spec = CorpusSpec.from_dict(manifest["spec"])
    v = json.loads((directory / "vocab.json").read_text())
    vocab = Vocabulary(v["words"], v["frequent"], v["rare"])

    def sentences(name):
        return [vocab.encode(line.split()) for line in (directory / f"{name}.txt").read_text().splitlines()]

    return SplitBundle(
        spec=spec,
        vocab=vocab,
        paired_train=_load_utterances(directory, "paired_train", vocab),
        unpaired_text=sentences("unpaired"),
        base_test=_load_utterances(directory, "test_vs", vocab),
        rare_tests={d: _load_utterances(directory, f"test_{d}", vocab) for d in RARE_DOMAINS},
        heldout_text=sentences("heldout"),
    )
