"""Class sets, learning-step partitions and coarse-to-fine hierarchies.

Fine classes get ids 1..N in the order of the taxonomy's ``names`` list.
Intermediate hierarchy classes (every level but the last, which is the
identity) get the ids that follow, ordered by level, then by the learning
step of their members, then by their first member.
"""

import json
from collections.abc import Iterable, Sequence
from importlib import resources
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from lidarcl.errors import InvalidClassError, TaxonomyError, UnsupportedQueryError

BACKGROUND = 0
UNLABELED = 255
BACKGROUND_NAME = "background"
UNLABELED_NAME = "unlabeled"

BUILTIN_TAXONOMIES = ("cil", "c2f", "desk")

# Largest id a class may take; UNLABELED stays outside the class space.
MAX_CLASS_ID = UNLABELED - 1


def normalize_name(name: str) -> str:
    """Case-fold a class name and unify hyphen/underscore/space spelling."""
    return "-".join(name.strip().lower().replace("_", " ").replace("-", " ").split())


class TaxonomyFile(BaseModel):
    """On-disk layout of a taxonomy JSON file."""

    model_config = ConfigDict(extra="forbid")

    names: list[str]
    steps: list[list[str]]
    hierarchy: list[dict[str, str]] | None = None


class ClassTaxonomy:
    """Immutable class space with step partition and optional hierarchy."""

    def __init__(
        self,
        names: Sequence[str],
        steps: Sequence[Sequence[str]],
        hierarchy: Sequence[dict[str, str]] | None = None,
    ):
        self._names = tuple(names)
        self._index: dict[str, int] = {
            normalize_name(BACKGROUND_NAME): BACKGROUND,
        }
        self._display: dict[int, str] = {BACKGROUND: BACKGROUND_NAME}

        if not self._names:
            raise TaxonomyError("taxonomy has no classes")
        for cid, name in enumerate(self._names, start=1):
            key = normalize_name(name)
            if key in (normalize_name(BACKGROUND_NAME), normalize_name(UNLABELED_NAME)):
                raise TaxonomyError(f"'{name}' is a reserved label name", offender=name)
            if key in self._index:
                raise TaxonomyError(f"class '{name}' listed twice in names", offender=name)
            self._index[key] = cid
            self._display[cid] = name
        self._fine = tuple(range(1, len(self._names) + 1))

        self._steps = self._parse_steps(steps)
        self._step_sets = tuple(frozenset(step) for step in self._steps)
        self._step_of = {cid: k for k, step in enumerate(self._steps) for cid in step}

        self._levels: tuple[dict[int, int], ...] = ()
        self._level_classes: tuple[tuple[int, ...], ...] = ()
        self._level_of: dict[int, int] = {}
        self._luts: tuple[np.ndarray, ...] = ()
        if hierarchy:
            self._parse_hierarchy(hierarchy)

    # -- construction -------------------------------------------------------

    def _parse_steps(self, steps: Sequence[Sequence[str]]) -> tuple[tuple[int, ...], ...]:
        if not steps:
            raise TaxonomyError("taxonomy has no learning steps")
        seen: dict[int, int] = {}
        parsed = []
        for k, step in enumerate(steps):
            if not step:
                raise TaxonomyError(f"step {k} is empty", offender=f"step {k}")
            ids = []
            for name in step:
                cid = self.class_id(name)
                if cid == BACKGROUND:
                    raise TaxonomyError(f"step {k} lists the background class", offender=name)
                if cid in seen:
                    raise TaxonomyError(
                        f"class '{name}' listed in steps {seen[cid]} and {k}; steps must be disjoint",
                        offender=name,
                    )
                seen[cid] = k
                ids.append(cid)
            parsed.append(tuple(ids))
        missing = [self._display[c] for c in self._fine if c not in seen]
        if missing:
            raise TaxonomyError(
                f"classes not assigned to any step: {', '.join(missing)}", offender=missing[0]
            )
        return tuple(parsed)

    def _parse_hierarchy(self, hierarchy: Sequence[dict[str, str]]) -> None:
        num_levels = len(hierarchy)
        fine_keys = {normalize_name(self._display[c]): c for c in self._fine}

        # Resolve each level to fine id -> level name (normalized) and check totality.
        resolved: list[dict[int, str]] = []
        display_of: dict[str, str] = {}
        for j, level in enumerate(hierarchy):
            mapping: dict[int, str] = {}
            for fine_name, level_name in level.items():
                key = normalize_name(fine_name)
                if key not in fine_keys:
                    raise InvalidClassError(
                        f"hierarchy level {j} maps unknown class '{fine_name}'", offender=fine_name
                    )
                mapping[fine_keys[key]] = normalize_name(level_name)
                display_of.setdefault(normalize_name(level_name), level_name)
            resolved.append(mapping)

        for j, mapping in enumerate(resolved):
            for cid in self._fine:
                if cid in mapping:
                    continue
                owner = next(
                    (resolved[i][cid] for i in range(j + 1, num_levels) if cid in resolved[i]),
                    None,
                )
                if owner is not None and j + 1 < num_levels:
                    raise TaxonomyError(
                        f"level {j + 1} class '{display_of[owner]}' has no ancestor at level {j} "
                        f"(class '{self._display[cid]}' unmapped)",
                        offender=display_of[owner],
                    )
                raise TaxonomyError(
                    f"class '{self._display[cid]}' has no ancestor at level {j}",
                    offender=self._display[cid],
                )

        last = resolved[-1]
        for cid in self._fine:
            if last[cid] != normalize_name(self._display[cid]):
                raise TaxonomyError(
                    f"last hierarchy level must be the identity, but maps "
                    f"'{self._display[cid]}' to '{display_of[last[cid]]}'",
                    offender=self._display[cid],
                )

        # Assign ids to intermediate level classes.
        levels: list[dict[int, int]] = []
        level_classes: list[tuple[int, ...]] = []
        next_id = len(self._names) + 1
        for j, mapping in enumerate(resolved[:-1]):
            members: dict[str, list[int]] = {}
            for cid in self._fine:
                members.setdefault(mapping[cid], []).append(cid)
            order = sorted(
                members,
                key=lambda n: (min(self._step_of[c] for c in members[n]), min(members[n])),
            )
            ids: dict[str, int] = {}
            for level_name in order:
                if level_name in self._index:
                    raise TaxonomyError(
                        f"level {j} class '{display_of[level_name]}' reuses an existing class name",
                        offender=display_of[level_name],
                    )
                if next_id > MAX_CLASS_ID:
                    raise TaxonomyError("too many classes for 8-bit label ids")
                ids[level_name] = next_id
                self._index[level_name] = next_id
                self._display[next_id] = display_of[level_name]
                self._level_of[next_id] = j
                next_id += 1
            levels.append({cid: ids[mapping[cid]] for cid in self._fine})
            level_classes.append(tuple(ids[n] for n in order))
        levels.append({cid: cid for cid in self._fine})
        level_classes.append(self._fine)
        for cid in self._fine:
            self._level_of[cid] = num_levels - 1

        # Composition consistency: every class at level j' has one ancestor at each j < j'.
        for hi in range(num_levels):
            for lo in range(hi):
                spans: dict[int, set[int]] = {}
                for cid in self._fine:
                    spans.setdefault(levels[hi][cid], set()).add(levels[lo][cid])
                for cls, ancestors in spans.items():
                    if len(ancestors) > 1:
                        names = ", ".join(sorted(self._display[a] for a in ancestors))
                        raise TaxonomyError(
                            f"level {hi} class '{self._display[cls]}' spans level {lo} classes {names}",
                            offender=self._display[cls],
                        )

        self._levels = tuple(levels)
        self._level_classes = tuple(level_classes)
        self._luts = tuple(self._build_lut(j) for j in range(num_levels))
        self._hierarchy_names = tuple(
            {self._display[cid]: self._display[levels[j][cid]] for cid in self._fine}
            for j in range(num_levels)
        )

    def _build_lut(self, level: int) -> np.ndarray:
        lut = np.full(UNLABELED + 1, -1, dtype=np.int64)
        lut[BACKGROUND] = BACKGROUND
        lut[UNLABELED] = UNLABELED
        for cid in self._fine:
            lut[cid] = self._levels[level][cid]
            # Any class at a level at least as fine as `level` has one ancestor there.
            for j in range(level, len(self._levels)):
                lut[self._levels[j][cid]] = self._levels[level][cid]
        return lut

    # -- names and ids ------------------------------------------------------

    @property
    def names(self) -> tuple[str, ...]:
        """Display names of the fine classes, in id order."""
        return self._names

    @property
    def fine_classes(self) -> tuple[int, ...]:
        return self._fine

    def class_id(self, name: str) -> int:
        """Resolve a class name (any spelling of hyphens, underscores, case)."""
        key = normalize_name(name)
        if key not in self._index:
            raise InvalidClassError(f"unknown class '{name}'", offender=name)
        return self._index[key]

    def name_of(self, cid: int) -> str:
        if cid == UNLABELED:
            return UNLABELED_NAME
        if cid not in self._display:
            raise InvalidClassError(f"unknown class id {cid}", offender=str(cid))
        return self._display[cid]

    def is_class(self, cid: int) -> bool:
        return cid in self._display and cid != BACKGROUND

    # -- steps --------------------------------------------------------------

    @property
    def num_steps(self) -> int:
        return len(self._steps)

    @property
    def steps(self) -> tuple[frozenset[int], ...]:
        return self._step_sets

    def step_classes(self, k: int) -> tuple[int, ...]:
        """Classes introduced at step k, in file order."""
        self._check_step(k)
        return self._steps[k]

    def step_of(self, cid: int) -> int:
        """Learning step a class belongs to; hierarchy classes use their first member's step."""
        if cid in self._step_of:
            return self._step_of[cid]
        if cid in self._level_of:
            return min(self._step_of[c] for c in self.descendants(cid))
        raise InvalidClassError(f"class id {cid} belongs to no step", offender=str(cid))

    def cumulative_classes(self, k: int) -> frozenset[int]:
        """Classes introduced at steps 0 through k."""
        self._check_step(k)
        return frozenset().union(*self._step_sets[: k + 1])

    def cumulative_order(self, k: int) -> tuple[int, ...]:
        """Classes of steps 0 through k in step order, as used for head rows."""
        self._check_step(k)
        return tuple(c for step in self._steps[: k + 1] for c in step)

    def _check_step(self, k: int) -> None:
        if not 0 <= k < self.num_steps:
            raise TaxonomyError(f"step {k} out of range [0, {self.num_steps})")

    # -- hierarchy ----------------------------------------------------------

    @property
    def has_hierarchy(self) -> bool:
        return bool(self._levels)

    @property
    def num_levels(self) -> int:
        return len(self._levels)

    def _require_hierarchy(self) -> None:
        if not self._levels:
            raise UnsupportedQueryError("taxonomy has no hierarchy")

    def _check_level(self, level: int) -> None:
        self._require_hierarchy()
        if not 0 <= level < self.num_levels:
            raise TaxonomyError(f"level {level} out of range [0, {self.num_levels})")

    def level_classes(self, level: int) -> tuple[int, ...]:
        self._check_level(level)
        return self._level_classes[level]

    def level_of(self, cid: int) -> int:
        self._require_hierarchy()
        if cid not in self._level_of:
            raise InvalidClassError(f"unknown class id {cid}", offender=str(cid))
        return self._level_of[cid]

    def ancestor(self, cid: int, level: int) -> int:
        """Unique class at ``level`` containing ``cid``; sentinels map to themselves."""
        self._check_level(level)
        if not 0 <= cid <= UNLABELED:
            raise InvalidClassError(f"unknown class id {cid}", offender=str(cid))
        result = int(self._luts[level][cid])
        if result < 0:
            raise InvalidClassError(
                f"class id {cid} has no ancestor at level {level}", offender=str(cid)
            )
        return result

    def ancestor_lut(self, level: int) -> np.ndarray:
        """Lookup table id -> ancestor at ``level``; -1 where undefined."""
        self._check_level(level)
        return self._luts[level]

    def descendants(self, cid: int) -> frozenset[int]:
        """Fine classes below a (hierarchy or fine) class."""
        if cid in self._step_of:
            return frozenset({cid})
        level = self.level_of(cid)
        return frozenset(c for c in self._fine if self._levels[level][c] == cid)

    # -- derived taxonomies and serialization -------------------------------

    def collapsed(self) -> "ClassTaxonomy":
        """Single-step taxonomy with every class in step 0 (the from-scratch baseline)."""
        return ClassTaxonomy(self._names, [list(self._names)])

    def to_dict(self) -> dict:
        data: dict = {
            "names": list(self._names),
            "steps": [[self._display[c] for c in step] for step in self._steps],
        }
        if self._levels:
            data["hierarchy"] = [dict(level) for level in self._hierarchy_names]
        return data

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClassTaxonomy):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    def __repr__(self) -> str:
        return f"ClassTaxonomy({len(self._names)} classes, {self.num_steps} steps, {self.num_levels} levels)"


def parse_taxonomy(text: str, source: str = "<string>") -> ClassTaxonomy:
    """Parse and validate taxonomy JSON text."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise TaxonomyError(f"{source}: {e.msg}", line=e.lineno) from e
    try:
        parsed = TaxonomyFile.model_validate(raw)
    except ValidationError as e:
        raise TaxonomyError(f"{source}: {e.errors()[0]['msg']}") from e
    return ClassTaxonomy(parsed.names, parsed.steps, parsed.hierarchy)


def load_taxonomy(path: Path) -> ClassTaxonomy:
    """Load a taxonomy file; all invariants are checked on load."""
    path = Path(path)
    if not path.exists():
        raise TaxonomyError(f"taxonomy file not found: {path}")
    return parse_taxonomy(path.read_text(encoding="utf-8"), str(path))


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("lidarcl") / "data" / f"{name}.json"))


def builtin_taxonomy(name: str) -> ClassTaxonomy:
    """One of the bundled taxonomies: 'cil', 'c2f' or 'desk'."""
    if name not in BUILTIN_TAXONOMIES:
        raise TaxonomyError(
            f"unknown built-in taxonomy '{name}'. Use one of: {list(BUILTIN_TAXONOMIES)}"
        )
    return load_taxonomy(builtin_path(name))


def resolve_taxonomy(name_or_path: str | Path) -> ClassTaxonomy:
    """Built-in name or path to a taxonomy file."""
    if str(name_or_path) in BUILTIN_TAXONOMIES:
        return builtin_taxonomy(str(name_or_path))
    return load_taxonomy(Path(name_or_path))


def ancestor(taxonomy: ClassTaxonomy, fine: int, level: int) -> int:
    return taxonomy.ancestor(fine, level)


def cumulative_classes(taxonomy: ClassTaxonomy, k: int) -> frozenset[int]:
    return taxonomy.cumulative_classes(k)


def class_ids(taxonomy: ClassTaxonomy, names: Iterable[str]) -> list[int]:
    return [taxonomy.class_id(n) for n in names]
