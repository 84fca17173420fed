"""Few-shot metric learning on patient-grouped embedding data.

The library covers the full episodic pipeline: dataset model and
patient-level folds (`datamodel`), binary/CSV embedding formats and a
synthetic clustered-data generator (`embedio`), circular-field-of-view image
preprocessing and a deterministic featurizer (`imageprep`), a fixed-operator
reverse-mode tape with Adam (`diffcore`), the four classification heads
(`heads`), patient-disjoint episode sampling with training, evaluation and
cross-validation (`episodic`), and report/PCA exports (`reporting`). The
`fslkit` console script exposes the synth/embed/run/transfer/report commands.
"""

from .datamodel import (
    Dataset,
    EmbeddingRecord,
    FoldAssignment,
    filter_by_patients,
    make_folds,
    validate_dataset,
)
from .embedio import (
    SynthSpec,
    read_csv_file,
    read_embeddings_file,
    synth_dataset,
    write_csv_file,
    write_embeddings_file,
)
from .episodic import (
    Episode,
    EpisodeConfig,
    EpisodeSampler,
    HeadParams,
    RunReport,
    TrainConfig,
    ablate_patients,
    cross_validate,
    evaluate,
    sample_episode,
    train,
    transfer,
)
from .heads import HEAD_IDS, AdapterParams, RelationParams, episode_loss, episode_scores

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "Dataset",
    "EmbeddingRecord",
    "Episode",
    "EpisodeConfig",
    "EpisodeSampler",
    "FoldAssignment",
    "HEAD_IDS",
    "HeadParams",
    "RelationParams",
    "RunReport",
    "SynthSpec",
    "TrainConfig",
    "ablate_patients",
    "cross_validate",
    "episode_loss",
    "episode_scores",
    "evaluate",
    "filter_by_patients",
    "make_folds",
    "read_csv_file",
    "read_embeddings_file",
    "sample_episode",
    "synth_dataset",
    "train",
    "transfer",
    "validate_dataset",
    "write_csv_file",
    "write_embeddings_file",
]
