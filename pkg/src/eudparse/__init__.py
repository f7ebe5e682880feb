"""Toolkit for enhanced-dependency graphs: transforms, scoring, parsing."""

from pathlib import Path

__version__ = "0.1.0"


def toy_corpus_path():
    """Path of the bundled 20-sentence toy corpus."""
    return Path(__file__).parent / "data" / "toy_eud.conllu"
