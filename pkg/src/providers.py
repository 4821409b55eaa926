"""
Concept RAG - Providers Module
Embedding and completion backends: OpenAI-compatible HTTP clients for real runs,
deterministic mocks for offline runs, and a persistent embedding cache
"""

import hashlib
import json
import logging
import os
import re
import threading
from itertools import combinations
from typing import Dict, List, Optional, Sequence

import numpy as np
import requests
from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS
from tenacity import (Retrying, retry_if_exception_type, stop_after_attempt,
                      wait_exponential)

import prompts
from config import (ConfigError, DimensionMismatchError, PromptTooLongError,
                    ProviderConfig, ProviderError)
from corpus_ingest import get_token_counter, split_sentences
from cost_ledger import CostLedger, Stage

logger = logging.getLogger(__name__)

EmbeddingVector = np.ndarray

DEFAULT_BASE_URL = "https://api.openai.com/v1"


class TransientHTTPError(requests.RequestException):
    """Retryable server-side failure (429 / 5xx)"""


# ============================================
# EMBEDDING CACHE
# ============================================

class EmbeddingCache:
    """
    Text-hash -> vector map, optionally backed by an append-only JSONL file.
    Reads are lock-free; writes are serialized.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._vectors: Dict[str, EmbeddingVector] = {}
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            self._load()

    def _load(self):
        with open(self.path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning(f"Ignoring corrupt embedding cache line in {self.path}")
                    continue
                self._vectors[record["key"]] = np.asarray(record["vector"], dtype=np.float64)
        logger.info(f"Loaded {len(self._vectors)} cached embeddings from {self.path}")

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, key: str) -> Optional[EmbeddingVector]:
        return self._vectors.get(key)

    def put_many(self, items: Dict[str, EmbeddingVector]):
        with self._lock:
            fresh = {k: v for k, v in items.items() if k not in self._vectors}
            self._vectors.update(fresh)
            if self.path and fresh:
                os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    for key in sorted(fresh):
                        f.write(json.dumps({"key": key, "vector": fresh[key].tolist()}) + "\n")


# ============================================
# EMBEDDERS
# ============================================

class EmbeddingProvider:
    """Base embedder: cache lookup, validation and ledger accounting around `_embed`"""

    def __init__(self, config: ProviderConfig, ledger: Optional[CostLedger] = None,
                 cache: Optional[EmbeddingCache] = None, seed: int = 42, counter=None):
        self.config = config
        self.dim = config.dim
        self.ledger = ledger if ledger is not None else CostLedger()
        self.cache = cache if cache is not None else EmbeddingCache(config.cache_path)
        self.seed = seed
        self.counter = counter or get_token_counter("words")

    @property
    def tag(self) -> str:
        return f"{self.config.kind}:{self.config.model_name}:{self.dim}"

    def _key(self, text: str) -> str:
        return hashlib.sha256(f"{self.tag}|{self.seed}|{text}".encode("utf-8")).hexdigest()

    def embed_batch(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        """
        Embed texts in order. Identical texts give bit-identical vectors within a run;
        every call adds exactly one ledger entry charged with the tokens actually sent.
        """
        for text in texts:
            if not isinstance(text, str) or not text:
                raise ValueError("embed_batch expects non-empty strings")
        keys = [self._key(t) for t in texts]
        missing: Dict[str, str] = {}
        for key, text in zip(keys, texts):
            if self.cache.get(key) is None and key not in missing:
                missing[key] = text
        if missing:
            miss_texts = list(missing.values())
            vectors = self._embed(miss_texts)
            fresh = {}
            for key, vec in zip(missing, vectors):
                vec = np.asarray(vec, dtype=np.float64)
                if vec.shape != (self.dim,):
                    raise DimensionMismatchError(
                        f"{self.tag} returned a vector of shape {vec.shape}, expected ({self.dim},)")
                if not np.all(np.isfinite(vec)):
                    raise ProviderError(f"{self.tag} returned a non-finite vector")
                fresh[key] = vec
            self.cache.put_many(fresh)
        sent_tokens = sum(self.counter.count(t) for t in missing.values())
        self.ledger.record(Stage.EMBEDDING, self.config.model_name, sent_tokens, 0,
                           self.config.price_per_1k_input, 0.0)
        return [self.cache.get(k) for k in keys]

    def embed(self, text: str) -> EmbeddingVector:
        return self.embed_batch([text])[0]

    def _embed(self, texts: List[str]) -> List[EmbeddingVector]:
        raise NotImplementedError


def _seeded_unit_vector(token: str, seed: int, dim: int) -> EmbeddingVector:
    digest = hashlib.sha256(f"{seed}|{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


_MOCK_TOKEN = re.compile(r"[^\W_]+")


class MockEmbeddingProvider(EmbeddingProvider):
    """
    Offline embedder. 'hash' style gives one pseudorandom unit vector per exact string;
    'semantic' style averages per-token vectors so texts sharing words are similar.
    """

    def _embed(self, texts: List[str]) -> List[EmbeddingVector]:
        if self.config.mock_style == "hash":
            return [_seeded_unit_vector(t, self.seed, self.dim) for t in texts]
        return [self._semantic_vector(t) for t in texts]

    def _semantic_vector(self, text: str) -> EmbeddingVector:
        tokens = [t for t in _MOCK_TOKEN.findall(text.lower()) if t not in ENGLISH_STOP_WORDS]
        if not tokens:
            return _seeded_unit_vector(text, self.seed, self.dim)
        vec = np.sum([_seeded_unit_vector(t, self.seed, self.dim) for t in tokens], axis=0)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            return _seeded_unit_vector(text, self.seed, self.dim)
        return vec / norm


class _HTTPClient:
    """Shared POST-with-retry for OpenAI-compatible endpoints"""

    max_attempts = 3
    wait = wait_exponential(multiplier=1, min=1, max=4)

    def _post(self, config: ProviderConfig, path: str, payload: dict) -> dict:
        base = (config.endpoint or os.getenv("CONCEPTRAG_BASE_URL") or DEFAULT_BASE_URL).rstrip("/")
        headers = {"Content-Type": "application/json"}
        api_key = config.api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        def attempt():
            response = requests.post(f"{base}{path}", json=payload, headers=headers,
                                     timeout=config.timeout)
            if response.status_code == 429 or response.status_code >= 500:
                raise TransientHTTPError(f"HTTP {response.status_code} from {path}")
            response.raise_for_status()
            return response.json()

        retrying = Retrying(
            stop=stop_after_attempt(self.max_attempts),
            wait=self.wait,
            retry=retry_if_exception_type((requests.ConnectionError, requests.Timeout,
                                           TransientHTTPError)),
            reraise=True,
        )
        try:
            return retrying(attempt)
        except requests.RequestException as e:
            logger.error(f"Request to {path} failed: {e}")
            raise ProviderError(f"{config.model_name}: {e}") from e
        except ValueError as e:
            raise ProviderError(f"{config.model_name}: malformed JSON response") from e


class RemoteEmbeddingProvider(_HTTPClient, EmbeddingProvider):
    """OpenAI-compatible /embeddings client"""

    def _embed(self, texts: List[str]) -> List[EmbeddingVector]:
        body = self._post(self.config, "/embeddings",
                          {"model": self.config.model_name, "input": texts})
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            vectors = [d["embedding"] for d in data]
        except (KeyError, TypeError) as e:
            raise ProviderError(f"unexpected embeddings response: {e}") from e
        if len(vectors) != len(texts):
            raise ProviderError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        return vectors


# ============================================
# COMPLETION BACKENDS
# ============================================

class LLMProvider:
    """Base completion backend: prompt-size guard and ledger accounting around `_complete`"""

    def __init__(self, config: ProviderConfig, ledger: Optional[CostLedger] = None, counter=None):
        self.config = config
        self.ledger = ledger if ledger is not None else CostLedger()
        self.counter = counter or get_token_counter("words")

    @property
    def tag(self) -> str:
        return f"{self.config.kind}:{self.config.model_name}"

    def complete(self, prompt: str, max_output_tokens: int,
                 stage: Stage = Stage.GENERATION) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        input_tokens = self.counter.count(prompt)
        if input_tokens > self.config.context_ceiling_tokens:
            raise PromptTooLongError(
                f"prompt has {input_tokens} tokens, ceiling is {self.config.context_ceiling_tokens}")
        text = self._complete(prompt, max_output_tokens)
        self.ledger.record(stage, self.config.model_name, input_tokens, self.counter.count(text),
                           self.config.price_per_1k_input, self.config.price_per_1k_output)
        return text

    def _complete(self, prompt: str, max_output_tokens: int) -> str:
        raise NotImplementedError


class RemoteLLMProvider(_HTTPClient, LLMProvider):
    """OpenAI-compatible /chat/completions client"""

    def _complete(self, prompt: str, max_output_tokens: int) -> str:
        body = self._post(self.config, "/chat/completions", {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": max_output_tokens,
            "temperature": 0,
        })
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError(f"unexpected chat response: {e}") from e


_CAPITALIZED = re.compile(r"\b[A-Z][A-Za-z]*\b")
_ANSWER_SPAN = re.compile(r"ANSWER_SPAN:[ \t]*(.+?)[ \t]*(?:[.;](?=\s|$)|$)", re.MULTILINE)
_QA_TOKEN = re.compile(r"[^\W_]+")


def mock_extract_entities(sentence: str) -> List[str]:
    """
    Capitalized, non-stopword words; adjacent ones pair into bigrams
    ("New York"), longer runs split into consecutive bigrams.
    """
    entities: List[str] = []
    run: List[str] = []
    last_end = -1

    def flush():
        for i in range(0, len(run), 2):
            name = " ".join(run[i:i + 2])
            if name not in entities:
                entities.append(name)

    for match in _CAPITALIZED.finditer(sentence):
        word = match.group(0)
        if word.lower() in ENGLISH_STOP_WORDS or len(word) < 2:
            flush()
            run = []
            last_end = -1
            continue
        if run and sentence[last_end:match.start()] != " ":
            flush()
            run = []
        run.append(word)
        last_end = match.end()
    flush()
    return entities


class MockLLMProvider(LLMProvider):
    """
    Scripted completions keyed by the prompt's template id.
    Extraction: rule-based entities (capitalized unigrams/bigrams) and co-sentence relations.
    Answering: echoes the ANSWER_SPAN of the context block that best overlaps the question.
    """

    def _complete(self, prompt: str, max_output_tokens: int) -> str:
        template = prompts.detect_template(prompt)
        if template == prompts.TEMPLATE_EXTRACTION:
            return self._extract(prompts.extract_section(prompt, "INPUT_TEXT"))
        if template == prompts.TEMPLATE_ANSWER:
            return self._answer(prompts.extract_section(prompt, "QUESTION"),
                                prompts.extract_section(prompt, "CONTEXT"))
        logger.debug("Mock LLM got a prompt without a known template id")
        return ""

    def _extract(self, text: str) -> str:
        d = prompts.TUPLE_DELIMITER
        records = []
        described = {}
        relations = []
        for sentence in split_sentences(text):
            names = mock_extract_entities(sentence)
            for name in names:
                described.setdefault(name, sentence)
            for head, tail in combinations(names, 2):
                if (head, tail) not in relations:
                    relations.append((head, tail, sentence))
        for name, sentence in described.items():
            records.append(f'("entity"{d}{name}{d}CONCEPT{d}{sentence})')
        seen = set()
        for head, tail, sentence in relations:
            if (head, tail) in seen:
                continue
            seen.add((head, tail))
            records.append(f'("relationship"{d}{head}{d}{tail}{d}{sentence}{d}1)')
        return prompts.RECORD_DELIMITER.join(records) + prompts.RECORD_DELIMITER + prompts.COMPLETION_DELIMITER

    def _answer(self, question: str, context: str) -> str:
        question_tokens = set(t for t in _QA_TOKEN.findall(question.lower())
                              if t not in ENGLISH_STOP_WORDS)
        best, best_score = None, -1
        for block in re.split(r"\n\s*\n", context):
            for match in _ANSWER_SPAN.finditer(block):
                block_tokens = set(_QA_TOKEN.findall(block.lower()))
                score = len(question_tokens & block_tokens)
                if score > best_score:
                    best, best_score = match.group(1).strip(), score
        return best if best is not None else "unknown"


def make_embedder(config: ProviderConfig, ledger: CostLedger, seed: int = 42,
                  cache_path: Optional[str] = None, counter=None) -> EmbeddingProvider:
    cache = EmbeddingCache(cache_path or config.cache_path)
    if config.kind == "mock":
        return MockEmbeddingProvider(config, ledger, cache, seed, counter)
    if config.kind == "remote":
        return RemoteEmbeddingProvider(config, ledger, cache, seed, counter)
    raise ConfigError(f"unknown embedder kind {config.kind!r}")


def make_llm(config: ProviderConfig, ledger: CostLedger, counter=None) -> LLMProvider:
    if config.kind == "mock":
        return MockLLMProvider(config, ledger, counter)
    if config.kind == "remote":
        return RemoteLLMProvider(config, ledger, counter)
    raise ConfigError(f"unknown llm kind {config.kind!r}")


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity; 0 when either vector is zero"""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(query: EmbeddingVector, matrix: np.ndarray) -> np.ndarray:
    """Cosine of `query` against every row; rows or query of zero norm score 0"""
    if matrix.size == 0:
        return np.zeros(0)
    norms = np.linalg.norm(matrix, axis=1)
    qn = float(np.linalg.norm(query))
    if qn == 0.0:
        return np.zeros(matrix.shape[0])
    dots = matrix @ query
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = np.where(norms > 0, dots / (norms * qn), 0.0)
    return sims
