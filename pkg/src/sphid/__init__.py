"""sphid: desk-scale generative retrieval over spherical semantic IDs."""

__version__ = "0.1.0"

__all__ = ["SemanticIdRetriever", "__version__"]


def __getattr__(name):
    # Imported lazily so the light numeric modules stay importable on their own.
    if name == "SemanticIdRetriever":
        from .estimator import SemanticIdRetriever

        return SemanticIdRetriever
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
