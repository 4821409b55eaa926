"""
Concept RAG - Context Bundle
Ordered, token-budgeted list of retrieved context items shared by both retrieval paths
"""

from dataclasses import dataclass, asdict
from typing import Iterator, List, Optional, Set, Tuple

CHUNK = "chunk"
KG_FACT = "kg_fact"

CONCEPT_PATH = "concept_path"
KG_PATH = "kg_path"


@dataclass(frozen=True)
class ContextItem:
    kind: str           # CHUNK or KG_FACT
    item_id: str
    text: str
    token_count: int
    source: str         # CONCEPT_PATH or KG_PATH
    rank_score: float = 0.0

    @property
    def key(self) -> Tuple[str, str]:
        return (self.kind, self.item_id)

    def to_dict(self) -> dict:
        return asdict(self)


class ContextBundle:
    """Items in emission order; never holds duplicates or more than `budget` tokens"""

    def __init__(self, budget: int, items: Optional[List[ContextItem]] = None):
        if budget <= 0:
            raise ValueError("budget must be > 0")
        self.budget = budget
        self._items: List[ContextItem] = []
        self._keys: Set[Tuple[str, str]] = set()
        self.total_tokens = 0
        self.failed = False
        self.error: Optional[str] = None
        for item in items or []:
            if not self.try_append(item):
                raise ValueError(f"item {item.key} does not fit the bundle")

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[ContextItem]:
        return iter(self._items)

    def __getitem__(self, index: int) -> ContextItem:
        return self._items[index]

    @property
    def items(self) -> List[ContextItem]:
        return list(self._items)

    def contains(self, kind: str, item_id: str) -> bool:
        return (kind, item_id) in self._keys

    def fits(self, token_count: int) -> bool:
        return self.total_tokens + token_count <= self.budget

    def try_append(self, item: ContextItem) -> bool:
        """Append unless it is a duplicate or would overflow the budget"""
        if item.key in self._keys or not self.fits(item.token_count):
            return False
        self._items.append(item)
        self._keys.add(item.key)
        self.total_tokens += item.token_count
        return True

    def chunk_ids(self) -> List[str]:
        return [i.item_id for i in self._items if i.kind == CHUNK]

    def text(self) -> str:
        return "\n\n".join(i.text for i in self._items)

    def to_dict(self) -> dict:
        data = {
            "budget": self.budget,
            "total_tokens": self.total_tokens,
            "items": [i.to_dict() for i in self._items],
        }
        if self.failed:
            data["failed"] = True
            data["error"] = self.error
        return data

    @classmethod
    def failure(cls, budget: int, error: str) -> "ContextBundle":
        bundle = cls(budget)
        bundle.failed = True
        bundle.error = error
        return bundle
