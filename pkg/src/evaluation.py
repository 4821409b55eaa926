"""
Concept RAG - Evaluation Module
QA metrics (context recall, exact match, token F1, embedding-cosine semantic score)
and the benchmark runner that writes per-item rows plus a run manifest
"""

import csv
import json
import logging
import math
import os
import re
import string
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from config import CorpusError
from context_bundle import ContextBundle
from providers import EmbeddingProvider, cosine

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QAItem:
    query_id: str
    question: str
    gold_answers: Tuple[str, ...]
    supporting_chunk_ids: Optional[FrozenSet[str]] = None

    def __post_init__(self):
        if not self.gold_answers:
            raise ValueError(f"QA item {self.query_id} has no gold answers")


def load_qa_dataset(path: str) -> List[QAItem]:
    """
    Read a JSONL QA file: query_id (or id), question, answers (list or string),
    optional supporting_chunk_ids
    """
    items: List[QAItem] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                query_id = str(record.get("query_id", record.get("id")))
                answers = record["answers"] if "answers" in record else record["answer"]
                if isinstance(answers, str):
                    answers = [answers]
                supporting = record.get("supporting_chunk_ids")
                item = QAItem(query_id, record["question"], tuple(str(a) for a in answers),
                              frozenset(supporting) if supporting is not None else None)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"malformed QA record: {e}", line_number)
            if query_id in seen:
                raise CorpusError(f"duplicate query_id {query_id!r}", line_number)
            seen.add(query_id)
            items.append(item)
    logger.info(f"Loaded {len(items)} QA items from {path}")
    return items


# ============================================
# METRICS
# ============================================

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace"""
    return " ".join(_ARTICLES.sub(" ", s.lower().translate(_PUNCT)).split())


def normalize_context(s: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace (articles kept)"""
    return " ".join(s.lower().translate(_PUNCT).split())


def context_recall(context: Union[str, ContextBundle], gold_answers: Iterable[str]) -> int:
    """1 iff some gold answer is a normalized substring of the context"""
    text = context.text() if isinstance(context, ContextBundle) else context
    haystack = normalize_context(text)
    if not haystack:
        return 0
    for gold in gold_answers:
        needle = normalize_context(gold)
        if needle and needle in haystack:
            return 1
    return 0


def supporting_recall(context_chunk_ids: Iterable[str], supporting: Optional[Iterable[str]]) -> Optional[float]:
    """Fraction of supporting chunks present in the context; None when the item has none"""
    if not supporting:
        return None
    gold = set(supporting)
    return len(gold & set(context_chunk_ids)) / len(gold)


def exact_match(prediction: str, gold_answers: Iterable[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


def _f1(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_token(prediction: str, gold_answers: Iterable[str]) -> float:
    """Best token-level F1 over the gold answers"""
    return max((_f1(prediction, g) for g in gold_answers), default=0.0)


def semantic_score(prediction: str, gold_answers: Sequence[str], provider: EmbeddingProvider) -> float:
    """
    Max cosine between the prediction and gold embeddings. Not comparable with
    model-based answer similarity scores.
    """
    if not prediction.strip():
        return 0.0
    vectors = provider.embed_batch([prediction] + list(gold_answers))
    return max(cosine(vectors[0], v) for v in vectors[1:])


# ============================================
# REPORT
# ============================================

@dataclass
class EvalRow:
    query_id: str
    repeat: int
    seed: int
    status: str = "ok"
    error: str = ""
    answer: str = ""
    cr: float = 0.0
    em: float = 0.0
    f1: float = 0.0
    semantic: Optional[float] = None
    supporting_recall: Optional[float] = None
    context_tokens: int = 0
    latency_s: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


CSV_FIELDS = [f.name for f in fields(EvalRow)]
METRIC_FIELDS = ("cr", "em", "f1", "semantic", "supporting_recall", "context_tokens", "latency_s")


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    manifest: Dict = field(default_factory=dict)

    @property
    def failed_count(self) -> int:
        return sum(1 for r in self.rows if not r.ok)

    def aggregates(self) -> Dict[str, Optional[float]]:
        """Means over successful rows; a metric no row carries is None"""
        good = [r for r in self.rows if r.ok]
        result: Dict[str, Optional[float]] = {"items": len(good), "failed": self.failed_count}
        for name in METRIC_FIELDS:
            values = [getattr(r, name) for r in good if getattr(r, name) is not None]
            result[name] = math.fsum(values) / len(values) if values else None
        return result

    def write(self, out_dir: str, prefix: str = "eval") -> Tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, f"{prefix}_rows.csv")
        json_path = os.path.join(out_dir, f"{prefix}_manifest.json")
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(asdict(row))
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump({"manifest": self.manifest, "aggregates": self.aggregates()},
                      f, indent=2, sort_keys=True)
        logger.info(f"Report written to {csv_path} and {json_path}")
        return csv_path, json_path


# answer_fn(item, repeat) -> (answer, final context bundle)
AnswerFn = Callable[[QAItem, int], Tuple[str, ContextBundle]]


def score_item(item: QAItem, answer: str, bundle: ContextBundle, repeat: int, seed: int,
               cr_mode: str = "answer", scorer: Optional[EmbeddingProvider] = None) -> EvalRow:
    row = EvalRow(item.query_id, repeat, seed, answer=answer)
    row.cr = float(context_recall(bundle, item.gold_answers))
    row.supporting_recall = supporting_recall(bundle.chunk_ids(), item.supporting_chunk_ids)
    if cr_mode == "supporting" and row.supporting_recall is not None:
        row.cr = row.supporting_recall
    row.em = float(exact_match(answer, item.gold_answers))
    row.f1 = f1_token(answer, item.gold_answers)
    if scorer is not None:
        row.semantic = semantic_score(answer, item.gold_answers, scorer)
    row.context_tokens = bundle.total_tokens
    return row


def run_benchmark(items: Sequence[QAItem], answer_fn: AnswerFn, repeats: int = 1, seed: int = 42,
                  cr_mode: str = "answer", scorer: Optional[EmbeddingProvider] = None,
                  parallelism: int = 1, show_progress: bool = True,
                  manifest: Optional[dict] = None) -> EvalReport:
    """
    Evaluate every item `repeats` times. A failing item becomes a `failed` row and is
    left out of the aggregates. Rows come back in (repeat, dataset) order regardless
    of parallelism.

    Args:
        items: QA items
        answer_fn: Runs retrieval, ensemble and generation for one item
        repeats: Number of passes; pass r is recorded with seed + r
        cr_mode: "answer" substring recall or "supporting" chunk recall
        scorer: Embedder for the semantic score, None to skip it
        parallelism: Worker threads
    """
    jobs = [(r, item) for r in range(repeats) for item in items]

    def evaluate(job) -> EvalRow:
        repeat, item = job
        start = time.perf_counter()
        try:
            answer, bundle = answer_fn(item, repeat)
            row = score_item(item, answer, bundle, repeat, seed + repeat, cr_mode, scorer)
        except Exception as e:
            logger.warning(f"Item {item.query_id} (repeat {repeat}) failed: {e}")
            row = EvalRow(item.query_id, repeat, seed + repeat, status="failed", error=str(e))
        row.latency_s = time.perf_counter() - start
        return row

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        rows = list(tqdm(pool.map(evaluate, jobs), total=len(jobs), desc="Evaluating",
                         unit="item", disable=not show_progress or not jobs))

    report = EvalReport(rows, dict(manifest or {}))
    agg = report.aggregates()
    if rows:
        logger.info(f"Evaluated {agg['items']} items ({agg['failed']} failed): "
                    f"CR={agg['cr']}, EM={agg['em']}, F1={agg['f1']}")
    return report


def write_rows_csv(path: str, rows: List[dict], fieldnames: Optional[List[str]] = None) -> str:
    """Plain CSV writer for the ablation and sweep tables"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path
