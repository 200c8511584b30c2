"""Seeded synthetic relevance world.

A world has two-token intents (head concept + facet), service attributes and
an ordered rule table. The label of a (query, service) pair is decided by the
first rule of the query's intent whose attribute pattern is contained in the
service; no match means irrelevant. Some heads have a second surface form
(a synonym) that maps to the same concept.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, SEP = "[PAD]", "[CLS]", "[SEP]"
ANSWER_TOKENS = ("ans_0", "ans_1", "ans_2")
VERDICT_TOKENS = ("verdict_0", "verdict_1", "verdict_2")
NO_RULE = "rule_none"
LABEL_NAMES = ("irrelevant", "moderate", "relevant")
REASON_MODES = ("oracle", "random", "none")
DEFAULT_LABEL_MIX = (0.162, 0.117, 0.721)


class DataError(ValueError):
    pass


class StratumUnreachable(DataError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_intents: int = 30
    n_attributes: int = 60
    n_rules: int = 120
    n_heads: int = 10
    n_facets: int = 5
    n_synonyms: int = 5
    n_modifiers: int = 10
    n_categories: int = 20
    attrs_per_intent: int = 6
    service_attrs: tuple[int, int] = (3, 5)
    query_modifiers: tuple[int, int] = (0, 2)

    def validate(self) -> None:
        for name in ("n_intents", "n_attributes", "n_rules", "n_heads", "n_facets"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.n_heads * self.n_facets < self.n_intents:
            raise DataError(
                f"{self.n_heads} heads x {self.n_facets} facets cannot form {self.n_intents} intents"
            )
        if self.n_rules < self.n_intents:
            raise DataError("every intent needs at least one rule")
        pool = min(self.attrs_per_intent, self.n_attributes)
        max_patterns = self.n_intents * (pool + math.comb(pool, 2))
        if self.n_rules > max_patterns:
            raise DataError(
                f"{self.n_rules} rules requested but only {max_patterns} (intent, pattern) combinations exist"
            )


@dataclass(frozen=True)
class Rule:
    token: str
    intent: int
    pattern: tuple[str, ...]
    label: int


class Vocabulary:
    """Closed, dense token inventory with fixed special ids."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:3]) != [PAD, CLS, SEP]:
            raise ValueError("vocabulary must start with [PAD], [CLS], [SEP]")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def tokenize(self, tokens: Iterable[str]) -> list[int]:
        out = []
        for t in tokens:
            if t not in self.ids:
                raise KeyError(f"unknown token {t!r}")
            out.append(self.ids[t])
        return out

    def detokenize(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise KeyError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return out

    @property
    def answer_ids(self) -> list[int]:
        return [self.ids[t] for t in ANSWER_TOKENS]


@dataclass
class World:
    seed: int
    config: WorldConfig
    intents: list[tuple[str, str]]
    synonyms: dict[str, str]
    attributes: list[str]
    modifiers: list[str]
    categories: list[str]
    rules: list[Rule]
    vocab: Vocabulary = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.vocab = Vocabulary(self._token_list())
        self._by_intent: dict[int, list[Rule]] = {}
        for r in self.rules:
            self._by_intent.setdefault(r.intent, []).append(r)
        self._rule_by_token = {r.token: r for r in self.rules}
        self._head_of = {h: h for h, _ in self.intents}
        self._head_of.update({alt: h for h, alt in self.synonyms.items()})
        self._intent_of = {pair: i for i, pair in enumerate(self.intents)}

    def _token_list(self) -> list[str]:
        heads = sorted({h for h, _ in self.intents}, key=_natural)
        facets = sorted({f for _, f in self.intents}, key=_natural)
        syn = [self.synonyms[h] for h in heads if h in self.synonyms]
        return [
            PAD,
            CLS,
            SEP,
            *ANSWER_TOKENS,
            *VERDICT_TOKENS,
            *heads,
            *syn,
            *facets,
            *self.attributes,
            *self.modifiers,
            *self.categories,
            *(r.token for r in self.rules),
            NO_RULE,
        ]

    # -- semantics ---------------------------------------------------------
    def canonical(self, token: str) -> str:
        return self._head_of.get(token, token)

    def intent_of_query(self, query: Sequence[str]) -> int:
        heads = [self.canonical(t) for t in query if self.canonical(t) in self._head_of.values()]
        facets = [t for t in query if t.startswith("facet_")]
        for h in heads:
            for f in facets:
                if (h, f) in self._intent_of:
                    return self._intent_of[(h, f)]
        raise DataError(f"query {list(query)} names no known intent")

    def rules_for(self, intent: int) -> list[Rule]:
        return self._by_intent.get(intent, [])

    def rule(self, token: str) -> Rule | None:
        return self._rule_by_token.get(token)

    def decide(self, intent: int, attrs: Iterable[str]) -> tuple[int, str]:
        """(label, deciding rule token) by first match in table order."""
        have = set(attrs)
        for r in self.rules_for(intent):
            if have.issuperset(r.pattern):
                return r.label, r.token
        return 0, NO_RULE

    def rule_label(self, token: str) -> int | None:
        if token == NO_RULE:
            return 0
        r = self._rule_by_token.get(token)
        return None if r is None else r.label

    def service_attrs(self, service: Sequence[str]) -> list[str]:
        attrs = set(self.attributes)
        return [t for t in service if t in attrs]

    def key_attrs(self, intent: int, service: Sequence[str]) -> list[str]:
        relevant = {a for r in self.rules_for(intent) for a in r.pattern}
        return [t for t in service if t in relevant]

    def label_of(self, query: Sequence[str], service: Sequence[str]) -> int:
        return self.decide(self.intent_of_query(query), self.service_attrs(service))[0]

    def oracle_reason(self, query: Sequence[str], service: Sequence[str]) -> list[str]:
        """Intent concept tokens, key service attributes, deciding rule, verdict."""
        intent = self.intent_of_query(query)
        head, facet = self.intents[intent]
        label, rule_tok = self.decide(intent, self.service_attrs(service))
        return [head, facet, *self.key_attrs(intent, service), rule_tok, VERDICT_TOKENS[label]]

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": asdict(self.config),
            "intents": [list(p) for p in self.intents],
            "synonyms": self.synonyms,
            "attributes": self.attributes,
            "modifiers": self.modifiers,
            "categories": self.categories,
            "rules": [asdict(r) for r in self.rules],
            "vocab": self.vocab.tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        cfg = d["config"]
        cfg = WorldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})
        world = cls(
            seed=d["seed"],
            config=cfg,
            intents=[tuple(p) for p in d["intents"]],
            synonyms=dict(d["synonyms"]),
            attributes=list(d["attributes"]),
            modifiers=list(d["modifiers"]),
            categories=list(d["categories"]),
            rules=[Rule(r["token"], r["intent"], tuple(r["pattern"]), r["label"]) for r in d["rules"]],
        )
        if "vocab" in d and d["vocab"] != world.vocab.tokens:
            raise DataError("stored vocabulary does not match the world inventories")
        return world

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other):
        return isinstance(other, World) and self.to_dict() == other.to_dict()


def _natural(tok: str):
    head, _, num = tok.rpartition("_")
    return (head, int(num)) if num.isdigit() else (tok, -1)


def _intent_rules(
    rng: np.random.Generator, intent: int, k: int, pool: list[str]
) -> list[tuple[tuple[str, ...], int]]:
    """Ordered (pattern, label) list for one intent.

    Exclusions (label 0) come first, then relevant patterns (label 2), then
    moderate rules built from part of a relevant pattern.
    """
    if k == 1:
        return [((pool[0],), 2)]
    pairs = [p for p in combinations(pool, 2)]
    n_excl = 1 if k >= 3 else 0
    n_mod = max(1, (k - n_excl) // 3)
    n_rel = k - n_excl - n_mod
    used: set[tuple[str, ...]] = set()
    out: list[tuple[tuple[str, ...], int]] = []
    singles = list(pool)
    excl = []
    for _ in range(n_excl):
        a = singles.pop(int(rng.integers(len(singles))))
        excl.append(((a,), 0))
    rel = []
    cand = [p for p in pairs if not any(x[0][0] in p for x in excl)]
    order = rng.permutation(len(cand))
    for j in order:
        if len(rel) >= n_rel:
            break
        pat = tuple(sorted(cand[j]))
        if pat in used:
            continue
        used.add(pat)
        rel.append((pat, 2))
    mod = []
    rel_attrs = [a for p, _ in rel for a in p]
    for a in rng.permutation(rel_attrs):
        if len(mod) >= n_mod:
            break
        pat = (str(a),)
        if pat in used:
            continue
        used.add(pat)
        mod.append((pat, 1))
    while len(rel) + len(mod) + len(excl) < k:
        leftovers = [p for p in pairs if tuple(sorted(p)) not in used] + [
            (a,) for a in pool if (a,) not in used
        ]
        if not leftovers:
            raise DataError(f"intent {intent}: not enough attribute patterns for {k} rules")
        pat = tuple(sorted(leftovers[int(rng.integers(len(leftovers)))]))
        used.add(pat)
        rel.append((pat, 2 if len(pat) == 2 else 1))
    return excl + rel + mod


def gen_world(seed: int, config: WorldConfig | None = None) -> World:
    """Deterministic world for ``(seed, config)``."""
    config = config or WorldConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    heads = [f"head_{i}" for i in range(config.n_heads)]
    facets = [f"facet_{i}" for i in range(config.n_facets)]
    combos = [(h, f) for h in heads for f in facets]
    chosen = sorted(rng.choice(len(combos), size=config.n_intents, replace=False).tolist())
    intents = [combos[i] for i in chosen]
    used_heads = sorted({h for h, _ in intents}, key=_natural)
    n_syn = max(1, min(config.n_synonyms, len(used_heads)))
    syn_heads = sorted(rng.choice(len(used_heads), size=n_syn, replace=False).tolist())
    synonyms = {used_heads[i]: f"alt_{used_heads[i]}" for i in syn_heads}
    attributes = [f"attr_{i}" for i in range(config.n_attributes)]
    modifiers = [f"mod_{i}" for i in range(config.n_modifiers)]
    categories = [f"cat_{i}" for i in range(config.n_categories)]

    base, extra = divmod(config.n_rules, config.n_intents)
    counts = [base + (1 if i < extra else 0) for i in range(config.n_intents)]
    pool_size = min(config.attrs_per_intent, config.n_attributes)
    rules: list[Rule] = []
    for intent, k in enumerate(counts):
        pool = [attributes[i] for i in sorted(rng.choice(config.n_attributes, size=pool_size, replace=False))]
        for pattern, label in _intent_rules(rng, intent, k, pool):
            rules.append(Rule(f"rule_{len(rules)}", intent, pattern, label))
    return World(seed, config, intents, synonyms, attributes, modifiers, categories, rules)


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelevanceExample:
    id: int
    query: tuple[str, ...]
    service: tuple[str, ...]
    reason: tuple[str, ...]
    label: int
    reason_mode: str = "oracle"

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "query": " ".join(self.query),
            "service": " ".join(self.service),
            "reason": " ".join(self.reason),
            "label": self.label,
            "reason_mode": self.reason_mode,
        }


def _sample_query(world: World, rng: np.random.Generator, intent: int) -> list[str]:
    head, facet = world.intents[intent]
    if head in world.synonyms and rng.random() < 0.5:
        head = world.synonyms[head]
    lo, hi = world.config.query_modifiers
    mods = [world.modifiers[i] for i in rng.choice(len(world.modifiers), size=int(rng.integers(lo, hi + 1)), replace=False)]
    toks = [head, facet]
    for m in mods:
        toks.insert(int(rng.integers(len(toks) + 1)), m)
    return toks


def _sample_service(world: World, rng: np.random.Generator, must: Sequence[str]) -> list[str]:
    lo, hi = world.config.service_attrs
    n = max(int(rng.integers(lo, hi + 1)), len(must))
    attrs = list(dict.fromkeys(must))
    while len(attrs) < n:
        a = world.attributes[int(rng.integers(len(world.attributes)))]
        if a not in attrs:
            attrs.append(a)
    attrs = [attrs[i] for i in rng.permutation(len(attrs))]
    return [world.categories[int(rng.integers(len(world.categories)))], *attrs]


def _propose(world: World, rng: np.random.Generator, label: int) -> tuple[list[str], list[str]]:
    intent = int(rng.integers(world.config.n_intents))
    options = [r for r in world.rules_for(intent) if r.label == label]
    must: Sequence[str] = ()
    if options and (label != 0 or rng.random() < 0.5):
        must = options[int(rng.integers(len(options)))].pattern
    return _sample_query(world, rng, intent), _sample_service(world, rng, must)


def gen_dataset(
    world: World,
    n: int,
    label_mix: Sequence[float] = DEFAULT_LABEL_MIX,
    reason_mode: str = "oracle",
    seed: int = 0,
    max_attempts: int = 2000,
    start_id: int = 0,
) -> list[RelevanceExample]:
    """Stratified rejection sampling of ``n`` labelled pairs.

    Each example first draws its target label from ``label_mix`` and then
    proposes pairs until the world assigns that label. The (query, service,
    label) triples depend only on ``(world, n, label_mix, seed)``, so the
    three reason modes share identical pairs.
    """
    mix = np.asarray(label_mix, dtype=float)
    if mix.shape != (3,) or (mix < 0).any() or abs(mix.sum() - 1.0) > 1e-9:
        raise DataError(f"label mixture must be 3 non-negative weights summing to 1, got {list(label_mix)}")
    if reason_mode not in REASON_MODES:
        raise DataError(f"unknown reason mode {reason_mode!r}")
    rng = np.random.default_rng([seed, 0])
    targets = rng.choice(3, size=n, p=mix)
    pairs: list[tuple[list[str], list[str]]] = []
    for target in targets:
        for _ in range(max_attempts):
            q, s = _propose(world, rng, int(target))
            if world.label_of(q, s) == target:
                pairs.append((q, s))
                break
        else:
            raise StratumUnreachable(f"label {int(target)} not reached after {max_attempts} attempts")
    examples = [
        RelevanceExample(start_id + i, tuple(q), tuple(sv), tuple(world.oracle_reason(q, sv)), int(t))
        for i, ((q, sv), t) in enumerate(zip(pairs, targets))
    ]
    return with_reason_mode(examples, reason_mode, seed)


def with_reason_mode(examples: Sequence[RelevanceExample], mode: str, seed: int = 0) -> list[RelevanceExample]:
    """Re-derive reasons for an oracle dataset under another reason mode."""
    if mode == "oracle":
        return list(examples)
    if mode == "none":
        return [RelevanceExample(e.id, e.query, e.service, (), e.label, "none") for e in examples]
    if mode != "random":
        raise DataError(f"unknown reason mode {mode!r}")
    rrng = np.random.default_rng([seed, 1])
    n = len(examples)
    out = []
    for i, e in enumerate(examples):
        if n == 1:
            j = 0
        else:
            j = int(rrng.integers(n - 1))
            j += j >= i
        out.append(RelevanceExample(e.id, e.query, e.service, examples[j].reason, e.label, "random"))
    return out


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

_FIELDS = {"id", "query", "service", "reason", "label", "reason_mode"}


def write_jsonl(path, examples: Iterable[RelevanceExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in examples:
            fh.write(json.dumps(e.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def _split(s: str) -> tuple[str, ...]:
    return tuple(s.split()) if s else ()


def read_jsonl(path) -> list[RelevanceExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) != _FIELDS:
                raise DataError(f"{path}:{lineno}: expected fields {sorted(_FIELDS)}")
            label = obj["label"]
            if not isinstance(label, int) or isinstance(label, bool) or label not in (0, 1, 2):
                raise DataError(f"{path}:{lineno}: label {label!r} not in {{0, 1, 2}}")
            if obj["reason_mode"] not in REASON_MODES:
                raise DataError(f"{path}:{lineno}: unknown reason_mode {obj['reason_mode']!r}")
            out.append(
                RelevanceExample(
                    int(obj["id"]),
                    _split(obj["query"]),
                    _split(obj["service"]),
                    _split(obj["reason"]),
                    label,
                    obj["reason_mode"],
                )
            )
    return out


def tokenize_example(world: World, e: RelevanceExample) -> tuple[list[int], list[int], list[int]]:
    v = world.vocab
    return v.tokenize(e.query), v.tokenize(e.service), v.tokenize(e.reason)
