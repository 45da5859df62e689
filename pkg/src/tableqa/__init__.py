"""Open-domain question answering over table corpora.

Pipeline stages: corpus preparation (infobox normalization, near-duplicate
merging), lexical and dense retrieval with in-batch and mined hard-negative
training, metadata-span pre-training, exhaustive inner-product search, a
span-extraction reader, and retrieval/QA evaluation.
"""

__version__ = "0.1.0"
