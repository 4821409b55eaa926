"""
Concept RAG - Cost Ledger
Append-only record of token usage and USD cost per pipeline stage
"""

import math
import threading
import time
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Dict, List, Optional


class Stage(str, Enum):
    EXTRACTION = "extraction"
    EMBEDDING = "embedding"
    GENERATION = "generation"


@dataclass(frozen=True)
class LedgerEntry:
    stage: Stage
    model: str
    input_tokens: int
    output_tokens: int
    price_per_1k_input: float
    price_per_1k_output: float
    timestamp: float

    @property
    def cost_usd(self) -> float:
        return (self.input_tokens * self.price_per_1k_input
                + self.output_tokens * self.price_per_1k_output) / 1000.0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["stage"] = self.stage.value
        data["cost_usd"] = self.cost_usd
        return data


class CostLedger:
    """Thread-safe, append-only list of provider calls"""

    def __init__(self):
        self._entries: List[LedgerEntry] = []
        self._lock = threading.Lock()

    def record(self, stage: Stage, model: str, input_tokens: int, output_tokens: int,
               price_per_1k_input: float = 0.0, price_per_1k_output: float = 0.0) -> LedgerEntry:
        if input_tokens < 0 or output_tokens < 0:
            raise ValueError("token counts must be >= 0")
        entry = LedgerEntry(
            stage=Stage(stage),
            model=model,
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            price_per_1k_input=price_per_1k_input,
            price_per_1k_output=price_per_1k_output,
            timestamp=time.time(),
        )
        with self._lock:
            self._entries.append(entry)
        return entry

    @property
    def entries(self) -> List[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def tokens(self, stage: Optional[Stage] = None) -> Dict[str, int]:
        selected = [e for e in self.entries if stage is None or e.stage == Stage(stage)]
        return {
            "input_tokens": sum(e.input_tokens for e in selected),
            "output_tokens": sum(e.output_tokens for e in selected),
        }

    def summary(self) -> dict:
        """Per-stage token and cost totals"""
        result = {}
        for stage in Stage:
            result[stage.value] = {
                **self.tokens(stage),
                "calls": sum(1 for e in self.entries if e.stage == stage),
                "cost_usd": ledger_total_usd(self, stage),
            }
        result["total_cost_usd"] = ledger_total_usd(self)
        return result


def ledger_total_usd(ledger: CostLedger, stage_filter: Optional[Stage] = None) -> float:
    """Sum of entry costs, optionally restricted to one stage"""
    stage = Stage(stage_filter) if stage_filter is not None else None
    return math.fsum(e.cost_usd for e in ledger.entries if stage is None or e.stage == stage)
