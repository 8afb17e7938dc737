import os

# Pin the math libraries to one thread before numpy loads: acceptance
# timings are quoted single-core and training promises bitwise
# reproducibility at a thread count of one.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
