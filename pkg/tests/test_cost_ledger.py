"""Tests for the cost ledger."""

from concurrent.futures import ThreadPoolExecutor

import pytest

from cost_ledger import CostLedger, Stage, ledger_total_usd


class TestCostLedger:

    def test_cost_per_entry(self):
        ledger = CostLedger()
        # 0.15 / 0.60 USD per million tokens
        entry = ledger.record(Stage.GENERATION, "m", 100, 10, 0.00015, 0.0006)
        assert entry.cost_usd == pytest.approx(2.1e-5)
        assert ledger_total_usd(ledger) == pytest.approx(2.1e-5)

    def test_stage_filter(self):
        ledger = CostLedger()
        ledger.record(Stage.EXTRACTION, "m", 1000, 0, 0.001, 0.0)
        ledger.record(Stage.GENERATION, "m", 2000, 0, 0.001, 0.0)
        assert ledger_total_usd(ledger, Stage.EXTRACTION) == pytest.approx(0.001)
        assert ledger.tokens(Stage.GENERATION) == {"input_tokens": 2000, "output_tokens": 0}
        assert ledger.tokens() == {"input_tokens": 3000, "output_tokens": 0}

    def test_stage_accepts_string(self):
        ledger = CostLedger()
        ledger.record("embedding", "m", 5, 0)
        assert ledger.entries[0].stage is Stage.EMBEDDING

    def test_negative_tokens_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            CostLedger().record(Stage.GENERATION, "m", -1, 0)

    def test_summary_has_every_stage(self):
        ledger = CostLedger()
        ledger.record(Stage.EXTRACTION, "m", 10, 5, 0.001, 0.002)
        summary = ledger.summary()
        assert set(summary) == {"extraction", "embedding", "generation", "total_cost_usd"}
        assert summary["extraction"]["calls"] == 1
        assert summary["embedding"]["calls"] == 0
        assert summary["total_cost_usd"] == pytest.approx(summary["extraction"]["cost_usd"])

    def test_concurrent_records(self):
        ledger = CostLedger()
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda _: ledger.record(Stage.EMBEDDING, "m", 1, 0), range(500)))
        assert len(ledger) == 500
        assert ledger.tokens(Stage.EMBEDDING)["input_tokens"] == 500
