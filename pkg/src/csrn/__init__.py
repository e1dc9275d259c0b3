"""Sequential news recommendation with a directed co-reading network of users.

The pipeline: ingest click logs (`corpus`), factor the early history with a
truncated SVD (`numerics`), connect each user to her most similar readers
(`coread`), encode recent clicks with a GRU and attend over neighbors'
current states (`model`), train with ranking losses and handwritten
reverse-mode gradients (`training`), and measure everything with a
leave-one-out harness plus classical baselines (`evalbench`).
"""

__version__ = "0.1.0"
