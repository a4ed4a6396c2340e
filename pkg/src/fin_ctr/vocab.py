"""String-to-id vocabularies with a reserved out-of-vocabulary row."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

OOV = 0


class FrozenVocabError(KeyError):
    pass


class VocabMap:
    """Contiguous ids from 1 in insertion order; id 0 is OOV."""

    def __init__(self, name: str, keys: Iterable[str] = ()):
        self.name = name
        self._ids: dict[str, int] = {}
        self.frozen = False
        for k in keys:
            self.add(k)

    def __len__(self):
        return len(self._ids)

    def __contains__(self, key):
        return key in self._ids

    @property
    def size(self) -> int:
        """Embedding rows needed, OOV row included."""
        return len(self._ids) + 1

    def add(self, key: str) -> int:
        key = str(key)
        got = self._ids.get(key)
        if got is not None:
            return got
        if self.frozen:
            raise FrozenVocabError(f"vocab {self.name!r} is frozen; cannot insert {key!r}")
        self._ids[key] = len(self._ids) + 1
        return self._ids[key]

    def freeze(self) -> "VocabMap":
        self.frozen = True
        return self

    def lookup(self, key: str) -> int:
        return self._ids.get(str(key), OOV)

    def items(self):
        return self._ids.items()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{k}\t{i}\n" for k, i in self._ids.items()))

    @classmethod
    def load(cls, name: str, path: str | Path) -> "VocabMap":
        v = cls(name)
        for line in Path(path).read_text().splitlines():
            if not line:
                continue
            k, i = line.rsplit("\t", 1)
            if int(i) != v.add(k):
                raise ValueError(f"{path}: ids are not contiguous at {k!r}")
        return v.freeze()

    def __eq__(self, other):
        return isinstance(other, VocabMap) and self.name == other.name and self._ids == other._ids
