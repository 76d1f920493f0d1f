"""Curriculum-ordered instruction tuning on a small decoder-only transformer.

Examples are scored by prompt length, attention-score variance over the
answer span, and answer-span cross-entropy; training visits a random
epoch first and difficulty-sorted epochs afterwards.
"""

__version__ = "0.1.0"
