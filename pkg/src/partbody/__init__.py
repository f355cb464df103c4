"""Part-to-body association detection toolkit.

Dense multi-scale target encoding, task-aligned anchor assignment,
association and detection losses with analytic gradients, inference
decoding (NMS, body-center reconstruction, greedy part-to-body
matching), the full evaluation metric suite, and a synthetic scene
simulator for end-to-end validation.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    BBox,
    ClassDef,
    ClassSchema,
    FeatureLevel,
    Point,
    center,
    contains,
    default_capacity,
    grid_cell,
    iou,
    make_levels,
)
from .encoder import (  # noqa: F401
    DenseTargetMaps,
    GroundTruthObject,
    SceneAnnotation,
    encode_assoc_offset,
    encode_box_offsets,
    encode_scene,
    resolve_parent,
)
from .assignment import (  # noqa: F401
    AlignmentConfig,
    AssignmentResult,
    alignment_metric,
    assign,
    assign_all_positive,
    normalized_cls_target,
)
from .losses import (  # noqa: F401
    DflConfig,
    LossReport,
    LossWeights,
    assoc_loss,
    cls_loss,
    dfl_loss,
    iou_loss,
    scene_loss,
    total_loss,
)
from .decoder import (  # noqa: F401
    AssociationResult,
    DecodedScene,
    DenseMaps,
    Detection,
    NmsConfig,
    decode_boxes,
    decode_pipeline,
    match_parts,
    match_parts_baseline,
    nms,
)
from .metrics import (  # noqa: F401
    EvalPair,
    MetricsReport,
    coco_ap_sweep,
    conditional_accuracy_and_joint_ap,
    evaluate,
    log_avg_miss_rate,
    miss_matching_rate,
    voc_ap,
)
from .simulator import (  # noqa: F401
    AblationConfig,
    NoiseSpec,
    PartSpec,
    SceneSpec,
    ablation_suite,
    generate_scene,
    render_predictions,
    simulate_pairs,
)
