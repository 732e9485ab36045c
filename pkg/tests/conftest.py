import os

# cap BLAS pools before numpy loads anywhere in the suite: measured runtimes
# (and the desk-scale learning budget) are single-threaded
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
