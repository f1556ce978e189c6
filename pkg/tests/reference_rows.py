"""Frozen reference rows for the multi-task gain metric.

Each row holds published multi-task / single-task result pairs from
driving-scene benchmarks (segmentation mIoU in percent, depth RMSE in
metres, optionally normals mean angular error in degrees) together with the
gain figure printed alongside them.  The implementation must reproduce the
printed gain from the raw numbers to within +/-0.05 percentage points
(published gains are rounded to two decimals).
"""

# (name, model metrics, baseline metrics, printed gain %)
DELTA_ROWS = [
    (
        "synthia-sd-shared-decoders",
        {"S": 69.83, "D": 5.166},
        {"S": 67.43, "D": 5.379},
        3.76,
    ),
    (
        "vkitti2-sd-shared-decoders",
        {"S": 87.73, "D": 5.720},
        {"S": 84.53, "D": 5.720},
        1.89,
    ),
    (
        "synthia-sd-distillation",
        {"S": 70.87, "D": 4.917},
        {"S": 67.43, "D": 5.379},
        6.85,
    ),
    (
        "vkitti2-sd-distillation",
        {"S": 88.43, "D": 5.571},
        {"S": 84.53, "D": 5.720},
        3.63,
    ),
    (
        "cityscapes-sd-shared-decoders",
        {"S": 70.43, "D": 6.797},
        {"S": 67.93, "D": 6.622},
        0.52,
    ),
    (
        "cityscapes-sd-distillation",
        {"S": 70.23, "D": 6.777},
        {"S": 67.93, "D": 6.622},
        0.52,
    ),
    (
        "synthia-sd-distillation-context",
        {"S": 77.50, "D": 4.289},
        {"S": 67.43, "D": 5.379},
        17.60,
    ),
    (
        "synthia-sd-attention-exchange",
        {"S": 80.53, "D": 4.161},
        {"S": 67.43, "D": 5.379},
        21.04,
    ),
    (
        "vkitti2-sd-distillation-context",
        {"S": 96.13, "D": 4.013},
        {"S": 84.53, "D": 5.720},
        21.78,
    ),
    (
        "synthia-sdn-shared-decoders",
        {"S": 71.27, "D": 5.108, "N": 18.51},
        {"S": 67.43, "D": 5.379, "N": 19.61},
        5.45,
    ),
]
