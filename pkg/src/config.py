"""
Concept RAG - Configuration Module
Engine parameters, provider settings and the shared exception hierarchy
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field, asdict, fields
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class ConceptRAGError(Exception):
    """Base error for the engine. `exit_code` is what the CLI returns."""
    exit_code = 1


class ConfigError(ConceptRAGError):
    exit_code = 2


class CorpusError(ConceptRAGError):
    """Malformed corpus input, carries the offending line number"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class DuplicateDocumentError(CorpusError):
    pass


class ProviderError(ConceptRAGError):
    pass


class DimensionMismatchError(ProviderError):
    pass


class PromptTooLongError(ProviderError):
    pass


class IndexMissingError(ConceptRAGError):
    exit_code = 2

    def __init__(self, stage: str, message: str = ""):
        self.stage = stage
        super().__init__(message or f"index stage '{stage}' has not been built")


class StaleIndexError(ConceptRAGError):
    def __init__(self, stage: str, message: str = ""):
        self.stage = stage
        super().__init__(message or f"index stage '{stage}' is stale, rebuild it first")


class IndexExistsError(ConceptRAGError):
    exit_code = 2


class IndexLockedError(ConceptRAGError):
    pass


# Secrets never leave the environment
API_KEY_ENV_VARS = ("CONCEPTRAG_API_KEY", "OPENAI_API_KEY")

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass
class ProviderConfig:
    """Settings for one embedding or completion backend"""
    kind: str = "mock"                  # "remote" or "mock"
    endpoint: Optional[str] = None      # base URL of an OpenAI-compatible API
    model_name: str = "semantic-mock"
    dim: int = 64
    price_per_1k_input: float = 0.0
    price_per_1k_output: float = 0.0
    cache_path: Optional[str] = None
    timeout: float = 30.0
    mock_style: str = "semantic"        # "semantic" or "hash" (embedders only)
    context_ceiling_tokens: int = 128000

    def validate(self, role: str):
        if self.kind not in ("remote", "mock"):
            raise ConfigError(f"{role}.kind must be 'remote' or 'mock', got {self.kind!r}")
        if self.kind == "remote" and not (self.endpoint or os.getenv("CONCEPTRAG_BASE_URL")):
            raise ConfigError(f"{role}: remote providers need an endpoint")
        if self.dim <= 0:
            raise ConfigError(f"{role}.dim must be > 0")
        if self.mock_style not in ("semantic", "hash"):
            raise ConfigError(f"{role}.mock_style must be 'semantic' or 'hash'")
        if self.price_per_1k_input < 0 or self.price_per_1k_output < 0:
            raise ConfigError(f"{role}: prices must be >= 0")

    def api_key(self) -> Optional[str]:
        for name in API_KEY_ENV_VARS:
            value = os.getenv(name)
            if value:
                return value
        return None


def _default_embedder() -> ProviderConfig:
    return ProviderConfig()


def _default_llm() -> ProviderConfig:
    return ProviderConfig(model_name="mock-llm", dim=1)


@dataclass
class Config:
    """
    Effective engine configuration.

    Defaults are the published operating point: chunk size 1200, budget 12000,
    similarity threshold 0.65, co-occurrence threshold 3, core ratio 0.8,
    ensemble weight 0.6, 25 seed concepts and 2 BFS hops.
    """
    # ingestion
    chunk_size_tokens: int = 1200
    tokenizer: str = "words"            # "words", "tiktoken:<encoding>" or "hf:<model>"
    strict: bool = False

    # concept graph
    keyword_count: int = 10
    theta_sem: float = 0.65
    theta_co: int = 3
    linkage: str = "origin"             # "origin" or "containment"
    cooccurrence_scope: str = "chunk"   # "chunk" or "sentence"
    semantic_filter: bool = True
    concept_embedding: str = "sentence" # "sentence" or "chunk"
    pagerank_damping: float = 0.85
    pagerank_tol: float = 1e-8
    pagerank_max_iter: int = 100

    # core selection
    kappa: float = 0.8
    concept_ranker: str = "pagerank"    # "pagerank" or "degree"
    chunk_aggregator: str = "max"       # "max", "sum" or "mean"

    # core-KG
    extraction_parallelism: int = 4
    extraction_max_output_tokens: int = 2048
    kg_seed_entities: int = 10
    kg_hops: int = 1

    # retrieval and ensemble
    context_budget_tokens: int = 12000
    top_k: int = 25
    hops: int = 2
    ensemble_lambda: float = 0.6
    rerank_mode: str = "local_global"   # "local_global" or "naive"
    retrieval_mode: str = "dual"        # "dual", "concept" or "kg"

    # generation and evaluation
    answer_max_tokens: int = 64
    cr_mode: str = "answer"             # "answer" or "supporting"
    semantic_score: bool = False
    repeats: int = 1
    eval_parallelism: int = 1

    seed: int = 42
    index_dir: str = "index"
    embedder: ProviderConfig = field(default_factory=_default_embedder)
    llm: ProviderConfig = field(default_factory=_default_llm)

    CHOICES = {
        "linkage": ("origin", "containment"),
        "cooccurrence_scope": ("chunk", "sentence"),
        "concept_embedding": ("sentence", "chunk"),
        "concept_ranker": ("pagerank", "degree"),
        "chunk_aggregator": ("max", "sum", "mean"),
        "rerank_mode": ("local_global", "naive"),
        "retrieval_mode": ("dual", "concept", "kg"),
        "cr_mode": ("answer", "supporting"),
    }

    def validate(self) -> "Config":
        """Raise ConfigError on the first violated constraint, return self otherwise"""
        checks = [
            (self.chunk_size_tokens > 0, "chunk_size_tokens must be > 0"),
            (self.context_budget_tokens > 0, "context_budget_tokens must be > 0"),
            (-1.0 <= self.theta_sem <= 1.0, "theta_sem must be in [-1, 1]"),
            (self.theta_co >= 1, "theta_co must be >= 1"),
            (0.0 < self.kappa <= 1.0, "kappa must be in (0, 1]"),
            (0.0 < self.ensemble_lambda < 1.0, "lambda must be in (0, 1)"),
            (self.top_k >= 1, "top_k must be >= 1"),
            (self.hops >= 0, "hops must be >= 0"),
            (self.keyword_count >= 1, "keyword_count must be >= 1"),
            (0.0 < self.pagerank_damping < 1.0, "pagerank_damping must be in (0, 1)"),
            (self.pagerank_tol > 0, "pagerank_tol must be > 0"),
            (self.pagerank_max_iter >= 1, "pagerank_max_iter must be >= 1"),
            (self.kg_seed_entities >= 1, "kg_seed_entities must be >= 1"),
            (self.kg_hops >= 0, "kg_hops must be >= 0"),
            (self.extraction_parallelism >= 1, "extraction_parallelism must be >= 1"),
            (self.eval_parallelism >= 1, "eval_parallelism must be >= 1"),
            (self.repeats >= 1, "repeats must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for name, allowed in self.CHOICES.items():
            value = getattr(self, name)
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")
        self.embedder.validate("embedder")
        self.llm.validate("llm")
        return self

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = dict(data)
        for role in ("embedder", "llm"):
            if role in values and isinstance(values[role], dict):
                base = asdict(_default_embedder() if role == "embedder" else _default_llm())
                provider_known = set(base)
                bad = set(values[role]) - provider_known
                if bad:
                    raise ConfigError(f"unknown {role} keys: {sorted(bad)}")
                base.update(values[role])
                values[role] = ProviderConfig(**base)
        return cls(**values)

    @classmethod
    def load(cls, path: Optional[str] = None) -> "Config":
        """Load a JSON config file with ${VAR} interpolation, or defaults when no path"""
        if not path:
            return cls()
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        raw = _ENV_PATTERN.sub(lambda m: os.getenv(m.group(1), ""), raw)
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        logger.debug(f"Loaded config from {path}")
        return cls.from_dict(data)

    def with_overrides(self, overrides: Dict[str, Any]) -> "Config":
        """Return a copy with non-None overrides applied (CLI flags beat the file)"""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                role, sub = key.split(".", 1)
                data[role][sub] = value
            else:
                data[key] = value
        return Config.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_manifest(self) -> Dict[str, Any]:
        """Config as echoed into manifests. Holds no secrets: keys live only in the environment."""
        return self.to_dict()
