"""Zero-shot human-object interaction detection with guided prompt learning.

Self-contained desk-scale stack: a numpy autodiff engine, a frozen dual
encoder trained on a synthetic world, guided learnable prompts with
unseen-class refinement, a pair-scoring head, and a HICO-style evaluator.
"""

__version__ = "0.1.0"
