"""Exception hierarchy shared across the pipeline."""


class BrqualError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(BrqualError):
    """Configuration file invalid or referenced path unresolvable."""


class UpstreamMissing(BrqualError):
    """A command's upstream artifact (corpus, detections, index, ...) is absent."""


# --- provider gateway ---

class ProviderError(BrqualError):
    """Base for failures of the external model provider."""


class TransportError(ProviderError):
    """Network or HTTP failure after the bounded retry budget."""


class RateLimited(ProviderError):
    """Provider kept returning 429 until the retry budget ran out."""


class AuthError(ProviderError):
    """Credentials rejected by the provider or the tracker."""


class CacheMiss(ProviderError):
    """Replay mode saw a request that was never recorded."""


class DimensionMismatch(ProviderError):
    """Embedding provider returned a vector of the wrong size."""


class MalformedCompletion(BrqualError):
    """A completion violated the required output schema or content policy."""


# --- ingest ---

class SchemaError(BrqualError):
    """Tracker payload is missing a required field."""


class EmptyPopulation(BrqualError):
    """Sampling requested from an empty population."""


# --- detect ---

class InsufficientData(BrqualError):
    """Not enough labeled examples to train."""


class DegenerateLabels(BrqualError):
    """All training examples carry the same label."""


# --- improve ---

class CatalogMissing(BrqualError):
    """No prompt template exists for a flagged (section, issue class) pair."""


class SlotOverflow(BrqualError):
    """Assembled prompt exceeds the token budget even with no knowledge blocks."""


class UnparseableOutput(BrqualError):
    """Improvement completion failed the section format contract after retry."""


# --- evaluate ---

class TooFewPairs(BrqualError):
    """Fewer than five non-zero differences remain for the signed-rank test."""


class LengthMismatch(BrqualError):
    """Paired inputs differ in length."""


class UnpairedAnnotation(BrqualError):
    """A report version was not annotated by exactly two annotators."""


class EmptyTable(BrqualError):
    """Word-vector table contains no entries."""
