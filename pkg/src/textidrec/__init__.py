"""Generative sequential recommendation with learned textual item IDs.

An ID generator model learns a short, unique, human-readable token sequence
for every catalog item from its metadata; a base recommender generates the
next item's ID under prefix-trie constrained decoding. The two models are
trained alternately and share one word-level vocabulary.
"""

__version__ = "0.1.0"
