"""Dataset synthesis and IO, the two-branch trainer, and retrieval evaluation.

Records are caption-granular: each carries its caption's token list and
feature sequence plus a copy of its image's feature sequence, so an image
with r captions appears in r records. Training runs both branches per
batch (instance embeddings with in-batch and memory-bank contrastive
losses; concept embeddings with their own contrastive loss and a
pseudo-label classification loss), updates all parameters with Adam,
moves the momentum mirror, and feeds the momentum embeddings into the
queues. Evaluation ranks with the beta-blend of instance-level and
concept-level cosine similarity.
"""
from __future__ import annotations

import base64
import csv
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import knowledge as kn
from . import numerics as nm
from . import objective as obj
from .numerics import AdamState, Matrix, adam_step, backward, rng_from_seed
from .objective import PrototypeState, SimilarityMatrix
from .representation import EncoderPair, FeatureAggregator, MemoryBank

METRICS_HEADER = [
    "epoch", "l_dcl_i", "l_mdcl", "l_dcl_c", "l_pgc", "total",
    "r1_t", "r5_t", "r10_t", "r1_i", "r5_i", "r10_i", "rsum",
]

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

@dataclass
class PairedRecord:
    pair_id: str
    image_id: str
    image_features: np.ndarray
    caption_tokens: list[str]
    caption_features: np.ndarray


@dataclass
class PairedDataset:
    records: list[PairedRecord]
    split: str = "train"
    captions_per_image: int = 1

    def __len__(self) -> int:
        return len(self.records)

    def corpus(self) -> list[list[str]]:
        return [r.caption_tokens for r in self.records]


@dataclass
class EvalResult:
    """Recall percentages for both retrieval directions at K in {1, 5, 10}."""

    r1_t: float
    r5_t: float
    r10_t: float
    r1_i: float
    r5_i: float
    r10_i: float

    @property
    def rsum(self) -> float:
        return self.r1_t + self.r5_t + self.r10_t + self.r1_i + self.r5_i + self.r10_i

    def as_row(self) -> dict[str, float]:
        return {
            "r1_t": self.r1_t, "r5_t": self.r5_t, "r10_t": self.r10_t,
            "r1_i": self.r1_i, "r5_i": self.r5_i, "r10_i": self.r10_i,
            "rsum": self.rsum,
        }


@dataclass
class TrainConfig:
    """All trainer knobs with desk-scale defaults.

    ``bank_capacity`` defaults to 512 at desk scale (use 4096 to match
    large-corpus training); the learning rate starts at 2e-4 and drops by
    ``lr_drop_factor`` at ``lr_drop_epoch`` (half the run when unset,
    mirroring a drop after 15 of 30 epochs).
    """

    embed_dim: int = 32
    d_p: int = 32
    decoder_hidden: int = 16
    mu: float = 0.1
    gamma: float = 0.3
    lambda_weight: float = 3.0
    beta: float = 0.9
    bank_capacity: int = 512
    momentum: float = 0.995
    eps_div: float = 0.1
    concept_smoothness: float = 10.0
    k_clusters: int = 16
    concepts: int = 24
    eps_t: float = 0.3
    batch_size: int = 32
    epochs: int = 20
    lr: float = 2e-4
    lr_drop_epoch: int | None = None
    lr_drop_factor: float = 0.1
    seed: int = 0
    diversity_estimator: str = "std"
    instance_loss: str = "dcl"
    use_memory_loss: bool = True
    use_concept_losses: bool = True
    triplet_margin: float = 0.2
    max_seq_len: int = 64

    def validate(self) -> None:
        checks = [
            (self.embed_dim >= 2, "embed_dim must be at least 2"),
            (self.d_p > 0 and self.d_p % 2 == 0, "d_p must be a positive even number"),
            (self.decoder_hidden >= 1, "decoder_hidden must be positive"),
            (self.mu > 0, "mu must be positive"),
            (self.gamma >= 0, "gamma must be non-negative"),
            (self.lambda_weight >= 0, "lambda_weight must be non-negative"),
            (0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]"),
            (self.bank_capacity >= 1, "bank_capacity must be positive"),
            (0.0 <= self.momentum <= 1.0, "momentum must lie in [0, 1]"),
            (self.eps_div > 0, "eps_div must be positive"),
            (self.concept_smoothness > 0, "concept_smoothness must be positive"),
            (self.k_clusters >= 1, "k_clusters must be positive"),
            (self.concepts >= 1, "concepts must be positive"),
            (0.0 < self.eps_t < 1.0, "eps_t must lie in (0, 1)"),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (self.epochs >= 0, "epochs must be non-negative"),
            (self.lr > 0, "lr must be positive"),
            (self.lr_drop_epoch is None or self.lr_drop_epoch >= 0, "lr_drop_epoch must be non-negative"),
            (self.lr_drop_factor > 0, "lr_drop_factor must be positive"),
            (self.seed >= 0, "seed must be non-negative"),
            (self.diversity_estimator in ("std", "entropy"),
             "diversity_estimator must be 'std' or 'entropy'"),
            (self.instance_loss in ("dcl", "dcl_i", "triplet"),
             "instance_loss must be 'dcl', 'dcl_i', or 'triplet'"),
            (self.triplet_margin >= 0, "triplet_margin must be non-negative"),
            (self.max_seq_len >= 1, "max_seq_len must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(f"invalid config: {message}")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

DISTRACTOR_TOKENS = ["a", "the", "with", "near", "some", "very", "two", "small"]


@dataclass
class SyntheticWorld:
    """Shared latent tables so different splits describe the same classes."""

    latent_classes: int
    attrs_per_class: int
    d_latent: int
    attr_latents: np.ndarray          # [classes, attrs_per_class, d_latent]
    distractor_latents: np.ndarray    # [len(DISTRACTOR_TOKENS), d_latent]
    proj_img: np.ndarray              # [d_latent, d_img]
    proj_txt: np.ndarray              # [d_latent, d_txt]

    def attr_token(self, class_id: int, slot: int) -> str:
        return f"cls{class_id}attr{slot}"


def build_world(latent_classes: int, seed: int, *, d_img: int = 48, d_txt: int = 48,
                d_latent: int = 16, attrs_per_class: int = 8,
                modality_alignment: float = 0.7) -> SyntheticWorld:
    """Latent tables plus the two fixed modality projections.

    The projections stand in for precomputed features from pretrained
    encoders, which live in partially aligned spaces; when both feature
    dims match, the text projection correlates with the image one at
    ``modality_alignment`` (0 = independent, 1 = identical).
    """
    if not 0.0 <= modality_alignment <= 1.0:
        raise ValueError("modality_alignment must lie in [0, 1]")
    rng = rng_from_seed(seed, 201)
    attr = rng.standard_normal((latent_classes, attrs_per_class, d_latent))
    attr /= np.linalg.norm(attr, axis=2, keepdims=True)
    distract = rng.standard_normal((len(DISTRACTOR_TOKENS), d_latent))
    distract /= np.linalg.norm(distract, axis=1, keepdims=True)
    proj_img = rng.standard_normal((d_latent, d_img)) / np.sqrt(d_latent)
    proj_txt = rng.standard_normal((d_latent, d_txt)) / np.sqrt(d_latent)
    if d_img == d_txt:
        a = modality_alignment
        proj_txt = a * proj_img + np.sqrt(1.0 - a * a) * proj_txt
    return SyntheticWorld(latent_classes, attrs_per_class, d_latent, attr, distract,
                          proj_img, proj_txt)


def synthetic_class_of(image_id: str) -> int:
    """Recover the latent class encoded in a synthetic image id."""
    return int(image_id.split("-")[1][1:])


def generate_synthetic(n_images: int, captions_per_image: int = 1, latent_classes: int = 8,
                       noise: float = 0.1, seed: int = 0, *, split: str = "train",
                       world: SyntheticWorld | None = None, attrs_per_image: int = 3,
                       d_img: int = 48, d_txt: int = 48) -> PairedDataset:
    """Deterministic paired dataset over shared latent classes.

    Every image shows a per-image subset of its class's attribute latents
    (projected to image space, plus Gaussian noise); each caption names
    exactly those attributes plus a couple of distractor tokens, with
    features looked up from the fixed latent tables (text side is
    noise-free). Captions are therefore discriminative within a class
    through the attribute combination.
    """
    if n_images < 1 or captions_per_image < 1:
        raise ValueError("need at least one image and one caption per image")
    if latent_classes < 2:
        raise ValueError("need at least two latent classes")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if world is None:
        world = build_world(latent_classes, seed, d_img=d_img, d_txt=d_txt)
    if attrs_per_image > world.attrs_per_class:
        raise ValueError("attrs_per_image exceeds the class attribute pool")
    rng = rng_from_seed(seed, 202, int.from_bytes(split.encode(), "big"))
    records: list[PairedRecord] = []
    for i in range(n_images):
        cls = int(rng.integers(world.latent_classes))
        slots = np.sort(rng.choice(world.attrs_per_class, size=attrs_per_image, replace=False))
        latents = world.attr_latents[cls][slots]
        extra = int(rng.integers(0, 3))
        rows = [latents[j % attrs_per_image] for j in range(attrs_per_image + extra)]
        image = np.stack(rows) @ world.proj_img
        image = image + noise * rng.standard_normal(image.shape)
        image_id = f"{split}-c{cls}-i{i:05d}"
        for k in range(captions_per_image):
            tokens = [world.attr_token(cls, int(s)) for s in slots]
            n_distract = int(rng.integers(1, 3))
            picks = rng.choice(len(DISTRACTOR_TOKENS), size=n_distract, replace=False)
            tokens = tokens + [DISTRACTOR_TOKENS[int(p)] for p in picks]
            order = rng.permutation(len(tokens))
            tokens = [tokens[int(o)] for o in order]
            token_latents = []
            for tok in tokens:
                if tok.startswith("cls"):
                    c, s = tok[3:].split("attr")
                    token_latents.append(world.attr_latents[int(c), int(s)])
                else:
                    token_latents.append(world.distractor_latents[DISTRACTOR_TOKENS.index(tok)])
            caption = np.stack(token_latents) @ world.proj_txt
            records.append(PairedRecord(f"{image_id}-cap{k}", image_id, image, tokens, caption))
    return PairedDataset(records, split, captions_per_image)


# ---------------------------------------------------------------------------
# dataset files (JSONL, one record per caption)
# ---------------------------------------------------------------------------

def save_dataset(data: PairedDataset, path) -> None:
    with open(path, "w") as fh:
        for r in data.records:
            fh.write(json.dumps({
                "pair_id": r.pair_id,
                "image_id": r.image_id,
                "image_features": r.image_features.tolist(),
                "caption_tokens": r.caption_tokens,
                "caption_features": r.caption_features.tolist(),
            }) + "\n")


def _validate_record(raw: dict, line_no: int, max_seq_len: int) -> PairedRecord:
    pair_id = raw.get("pair_id")
    if not isinstance(pair_id, str) or not pair_id:
        raise ValueError(f"line {line_no}: record has no pair_id")
    for key in ("image_id", "image_features", "caption_tokens", "caption_features"):
        if key not in raw:
            raise ValueError(f"record {pair_id!r}: missing field {key!r}")
    image = np.asarray(raw["image_features"], dtype=np.float64)
    caption = np.asarray(raw["caption_features"], dtype=np.float64)
    for name, arr in (("image_features", image), ("caption_features", caption)):
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"record {pair_id!r}: {name} must be a nonempty 2-D array")
        if arr.shape[0] > max_seq_len:
            raise ValueError(f"record {pair_id!r}: {name} longer than max_seq_len={max_seq_len}")
        if not np.isfinite(arr).all():
            raise ValueError(f"record {pair_id!r}: {name} contains non-finite values")
    tokens = raw["caption_tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise ValueError(f"record {pair_id!r}: caption_tokens must be a list of strings")
    return PairedRecord(pair_id, str(raw["image_id"]), image, tokens, caption)


def load_dataset(path, split: str | None = None, max_seq_len: int = 64) -> PairedDataset:
    """Read and validate a JSONL dataset; errors carry line or record ids."""
    records: list[PairedRecord] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"parse error at line {line_no}: {e.msg}") from e
            records.append(_validate_record(raw, line_no, max_seq_len))
    if not records:
        raise ValueError(f"dataset {path} has no records")
    seen = set()
    for r in records:
        if r.pair_id in seen:
            raise ValueError(f"record {r.pair_id!r}: duplicate pair_id")
        seen.add(r.pair_id)
    counts: dict[str, int] = {}
    for r in records:
        counts[r.image_id] = counts.get(r.image_id, 0) + 1
    if split is None:
        stem = str(path).rsplit("/", 1)[-1]
        split = stem.split(".")[0]
    return PairedDataset(records, split, max(counts.values()))


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

class AlignmentModel:
    """Both branches' parameters and forward passes.

    The visual aggregator is shared between the instance embedding and
    the concept-branch query; the textual side uses separate aggregators
    for the two roles. Concept vectors and the thresholded adjacency are
    frozen constants; only the convolution weight, the two query
    matrices, and the classifier train on the concept side.
    """

    def __init__(self, cfg: TrainConfig, d_img: int, d_txt: int,
                 vocab: kn.ConceptVocabulary, adjacency: np.ndarray,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else rng_from_seed(cfg.seed, 11)
        f = cfg.embed_dim
        self.cfg = cfg
        self.d_img = d_img
        self.d_txt = d_txt
        self.vocab = vocab
        self.adjacency = np.asarray(adjacency, dtype=np.int64)
        self.vis_agg = FeatureAggregator(d_img, f, cfg.d_p, cfg.decoder_hidden, rng)
        self.txt_agg = FeatureAggregator(d_txt, f, cfg.d_p, cfg.decoder_hidden, rng)
        self.txt_concept_agg = FeatureAggregator(d_txt, f, cfg.d_p, cfg.decoder_hidden, rng)
        if d_img == d_txt:
            # symmetric start: both modalities leave the gate with the same
            # encoder, mirroring how pretrained features arrive pre-aligned
            for k, m in self.vis_agg.p.items():
                self.txt_agg.p[k] = Matrix(m.value)
                self.txt_concept_agg.p[k] = Matrix(m.value)
        self.query_head = kn.ConceptQueryHead(f, cfg.concept_smoothness)
        d_c = vocab.init_embeddings.shape[1]
        self.extra: dict[str, Matrix] = {
            "w_sc": Matrix(rng.standard_normal((d_c, f)) / np.sqrt(d_c)),
            "classifier": Matrix(0.01 * rng.standard_normal((cfg.k_clusters, f))),
        }
        self.groups: dict[str, dict[str, Matrix]] = {
            "vis": self.vis_agg.p,
            "txt": self.txt_agg.p,
            "txtc": self.txt_concept_agg.p,
            "query": self.query_head.p,
            "extra": self.extra,
        }
        self.encoder_pair = EncoderPair({"vis": self.vis_agg.p, "txt": self.txt_agg.p})

    def param_items(self):
        for prefix, d in self.groups.items():
            for k, m in d.items():
                yield f"{prefix}.{k}", m

    def set_param(self, name: str, value: Matrix) -> None:
        prefix, key = name.split(".", 1)
        self.groups[prefix][key] = value

    def embed_images(self, seqs, momentum: bool = False) -> Matrix:
        params = self.encoder_pair.momentum_group("vis") if momentum else None
        return self.vis_agg.aggregate_batch(seqs, params=params)

    def embed_captions(self, seqs, momentum: bool = False) -> Matrix:
        params = self.encoder_pair.momentum_group("txt") if momentum else None
        return self.txt_agg.aggregate_batch(seqs, params=params)

    def embed_captions_concept(self, seqs) -> Matrix:
        return self.txt_concept_agg.aggregate_batch(seqs)

    def concept_basis(self) -> Matrix:
        return kn.gcn_forward(self.vocab.init_embeddings, self.adjacency, self.extra["w_sc"])

    def concept_embed(self, query: Matrix, basis: Matrix, modality: str):
        return kn.concept_query(self.query_head, query, basis, modality)


@dataclass
class TrainState:
    """Everything training accumulates: parameters, mirrors, queues, prototypes."""

    config: TrainConfig
    model: AlignmentModel
    adam: dict[str, AdamState]
    bank_v: MemoryBank
    bank_w: MemoryBank
    prototypes: PrototypeState | None = None
    epochs_run: int = 0
    best: dict | None = None


def build_state(cfg: TrainConfig, data: PairedDataset) -> TrainState:
    """Initialize model, optimizer states, and queues from a training set."""
    cfg.validate()
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    d_img = data.records[0].image_features.shape[1]
    d_txt = data.records[0].caption_features.shape[1]
    corpus = data.corpus()
    stop = kn.DEFAULT_STOPLIST
    available = len({t for cap in corpus for t in cap if t not in stop})
    if available < 1:
        raise ValueError("no non-stop tokens available for the concept vocabulary")
    vocab = kn.build_vocabulary(corpus, min(cfg.concepts, available), stop,
                                embed_dim=cfg.embed_dim, seed=cfg.seed)
    stats = kn.build_cooccurrence(corpus, vocab)
    adjacency = kn.binarize(stats.conditional, cfg.eps_t)
    model = AlignmentModel(cfg, d_img, d_txt, vocab, adjacency)
    adam = {name: AdamState(m.rows, m.cols, cfg.lr) for name, m in model.param_items()}
    return TrainState(cfg, model, adam,
                      MemoryBank(cfg.bank_capacity, cfg.embed_dim),
                      MemoryBank(cfg.bank_capacity, cfg.embed_dim))


# ---------------------------------------------------------------------------
# losses for one batch
# ---------------------------------------------------------------------------

def triplet_baseline_loss(sim: SimilarityMatrix, margin: float) -> Matrix:
    """Bidirectional hinge on every negative, summed per anchor, mean over anchors."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    n = sim.scores.rows
    if sim.scores.cols != n or sim.positive_index is None or \
            not np.array_equal(sim.positive_index, np.arange(n)):
        raise ValueError("need a square similarity matrix with diagonal positives")
    off_diag = Matrix(1.0 - np.eye(n))

    def direction(scores: Matrix) -> Matrix:
        pos = nm.row_sum(scores * Matrix(np.eye(n)))
        hinge = nm.relu((scores - pos) + margin) * off_diag
        return nm.sum_all(hinge) * (1.0 / n)

    return direction(sim.scores) + direction(nm.transpose(sim.scores))


def _diversity_pair(sim: SimilarityMatrix, estimator: str, eps: float):
    fwd = obj.diversity_std(sim, eps) if estimator == "std" else obj.diversity_entropy(sim, eps)
    flipped = sim.transposed()
    bwd = obj.diversity_std(flipped, eps) if estimator == "std" else obj.diversity_entropy(flipped, eps)
    return fwd, bwd


def _instance_loss(cfg: TrainConfig, sim: SimilarityMatrix) -> Matrix:
    if cfg.instance_loss == "triplet":
        return triplet_baseline_loss(sim, cfg.triplet_margin)
    if cfg.instance_loss == "dcl_i" or sim.scores.rows == 1:
        return obj.dcl_i_loss(sim, cfg.mu, cfg.gamma)
    div_f, div_b = _diversity_pair(sim, cfg.diversity_estimator, cfg.eps_div)
    return obj.dcl_loss(sim, div_f, div_b, cfg.mu, cfg.gamma)


def batch_losses(state: TrainState, records: list[PairedRecord],
                 labels: np.ndarray | None) -> tuple[obj.LossReport, Matrix, Matrix]:
    """Forward both branches on one batch; returns the report and momentum embeddings."""
    cfg = state.config
    model = state.model
    img_seqs = [r.image_features for r in records]
    cap_seqs = [r.caption_features for r in records]

    v_inst = model.embed_images(img_seqs)
    w_inst = model.embed_captions(cap_seqs)
    v_mom = model.embed_images(img_seqs, momentum=True).detach()
    w_mom = model.embed_captions(cap_seqs, momentum=True).detach()

    sim = obj.cosine_matrix(v_inst, w_inst)
    instance = _instance_loss(cfg, sim)

    memory = None
    if cfg.use_memory_loss and len(state.bank_v) >= cfg.batch_size \
            and len(state.bank_w) >= cfg.batch_size:
        memory = obj.m_dcl_loss(v_inst, w_inst, v_mom.value, w_mom.value,
                                state.bank_v, state.bank_w, cfg.mu, cfg.gamma,
                                estimator=cfg.diversity_estimator, eps=cfg.eps_div)

    concept = None
    pgc = None
    if cfg.use_concept_losses:
        basis = model.concept_basis()
        v_concept, _ = model.concept_embed(v_inst, basis, "visual")
        w_query = model.embed_captions_concept(cap_seqs)
        w_concept, _ = model.concept_embed(w_query, basis, "textual")
        sim_c = obj.cosine_matrix(v_concept, w_concept)
        if sim_c.scores.rows == 1:
            concept = obj.dcl_i_loss(sim_c, cfg.mu, cfg.gamma)
        else:
            div_f, div_b = _diversity_pair(sim_c, cfg.diversity_estimator, cfg.eps_div)
            concept = obj.dcl_loss(sim_c, div_f, div_b, cfg.mu, cfg.gamma)
        if labels is not None:
            pgc = obj.pgc_loss(v_concept, w_concept, model.extra["classifier"], labels)

    report = obj.total_loss(instance, memory, concept, pgc, cfg.lambda_weight)
    return report, v_mom, w_mom


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _unique_images(records: list[PairedRecord]):
    order: list[str] = []
    index: dict[str, int] = {}
    seqs = []
    for r in records:
        if r.image_id not in index:
            index[r.image_id] = len(order)
            order.append(r.image_id)
            seqs.append(r.image_features)
    caption_image = np.array([index[r.image_id] for r in records], dtype=np.int64)
    return order, seqs, caption_image


def _embed_chunked(embed_fn, seqs, chunk: int = 128) -> np.ndarray:
    parts = [embed_fn(seqs[i:i + chunk]).value for i in range(0, len(seqs), chunk)]
    return np.vstack(parts)


def _instance_sums(state: TrainState, records: list[PairedRecord]) -> np.ndarray:
    """v + w per record from the main encoders, for prototype clustering."""
    _, img_seqs, caption_image = _unique_images(records)
    v = _embed_chunked(state.model.embed_images, img_seqs)
    w = _embed_chunked(state.model.embed_captions, [r.caption_features for r in records])
    return v[caption_image] + w


def _snapshot(state: TrainState) -> dict[str, np.ndarray]:
    return {name: m.value.copy() for name, m in state.model.param_items()}


def _align_cluster_ids(new: PrototypeState, prev_centroids: np.ndarray) -> PrototypeState:
    """Relabel clusters to match the nearest previous centroids.

    Cluster ids are otherwise arbitrary per run, which would force the
    label classifier to relearn its output mapping after every epoch's
    reclustering. Greedy nearest-pair matching keeps ids stable.
    """
    k = new.k
    if prev_centroids.shape != new.centroids.shape:
        return new
    dists = ((new.centroids[:, None, :] - prev_centroids[None, :, :]) ** 2).sum(axis=2)
    assignment = np.full(k, -1, dtype=np.int64)
    used_new, used_prev = set(), set()
    flat_order = np.argsort(dists, axis=None, kind="stable")
    for flat in flat_order:
        i, j = divmod(int(flat), k)
        if i in used_new or j in used_prev:
            continue
        assignment[i] = j
        used_new.add(i)
        used_prev.add(j)
        if len(used_new) == k:
            break
    remaining = sorted(set(range(k)) - used_prev)
    for i in range(k):
        if assignment[i] < 0:
            assignment[i] = remaining.pop(0)
    centroids = np.empty_like(new.centroids)
    centroids[assignment] = new.centroids
    labels = assignment[new.labels]
    return PrototypeState(k, centroids, labels, new.inertia, new.inertia_path)


def train(cfg: TrainConfig, data: PairedDataset, val_data: PairedDataset | None = None,
          metrics_path=None) -> tuple[TrainState, list[dict]]:
    """Run the full two-branch loop; returns the final state and per-epoch rows.

    Per epoch: recluster prototypes from the summed instance embeddings,
    shuffle caption records, and per batch compute all enabled losses,
    take one Adam step, move the momentum mirror, and enqueue the
    momentum embeddings. The memory loss stays off until both queues hold
    at least one full batch. Evaluates on ``val_data`` every epoch and
    keeps the best-rsum parameter snapshot.
    """
    state = build_state(cfg, data)
    rows: list[dict] = []
    drop_at = cfg.lr_drop_epoch if cfg.lr_drop_epoch is not None else max(cfg.epochs // 2, 1)
    shuffle_rng = rng_from_seed(cfg.seed, 12)

    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_drop_factor if epoch >= drop_at else 1.0)
        for adam_state in state.adam.values():
            adam_state.lr = lr

        labels_all = None
        if cfg.use_concept_losses:
            points = _instance_sums(state, data.records)
            k_eff = min(cfg.k_clusters, len(data))
            fresh = obj.kmeans_cluster(points, k_eff, seed=cfg.seed, n_init=4)
            if state.prototypes is not None and state.prototypes.k == k_eff:
                fresh = _align_cluster_ids(fresh, state.prototypes.centroids)
            state.prototypes = fresh
            state.prototypes.classifier = state.model.extra["classifier"]
            labels_all = state.prototypes.labels

        order = shuffle_rng.permutation(len(data))
        sums = {"l_dcl_i": 0.0, "l_mdcl": 0.0, "l_dcl_c": 0.0, "l_pgc": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            records = [data.records[i] for i in batch_idx]
            labels = labels_all[batch_idx] if labels_all is not None else None
            try:
                report, v_mom, w_mom = batch_losses(state, records, labels)
                backward(report.total)
            except nm.NonFiniteError as e:
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {e}") from e
            for name, param in list(state.model.param_items()):
                grad = param.grad if param.grad is not None else np.zeros_like(param.value)
                state.model.set_param(name, adam_step(state.adam[name], param, grad))
            state.model.encoder_pair.momentum_update(cfg.momentum)
            state.bank_v.enqueue(v_mom.value)
            state.bank_w.enqueue(w_mom.value)
            for key, value in (("l_dcl_i", report.l_dcl_i), ("l_mdcl", report.l_mdcl),
                               ("l_dcl_c", report.l_dcl_c), ("l_pgc", report.l_pgc),
                               ("total", report.total.item())):
                sums[key] += value
            n_batches += 1

        row = {"epoch": epoch}
        row.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        if val_data is not None:
            result = evaluate(state, val_data, cfg.beta)
            row.update(result.as_row())
            if state.best is None or result.rsum > state.best["rsum"]:
                state.best = {"rsum": result.rsum, "epoch": epoch, "params": _snapshot(state)}
        else:
            row.update({k: float("nan") for k in
                        ("r1_t", "r5_t", "r10_t", "r1_i", "r5_i", "r10_i", "rsum")})
        rows.append(row)
        state.epochs_run = epoch + 1

    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return state, rows


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRICS_HEADER})


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def recalls_from_similarity(scores: np.ndarray, caption_image: np.ndarray) -> EvalResult:
    """Recall@{1,5,10} both ways from a [n_images x n_captions] score matrix.

    ``caption_image[j]`` is the row index of caption j's ground-truth
    image. Ties rank the lower candidate index first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    caption_image = np.asarray(caption_image, dtype=np.int64)
    n_img, n_cap = scores.shape
    if caption_image.shape != (n_cap,):
        raise ValueError("need one ground-truth image per caption column")

    text_hits = np.zeros(3)
    for i in range(n_img):
        order = np.argsort(-scores[i], kind="stable")
        best = np.flatnonzero(caption_image[order] == i)
        if best.size == 0:
            continue
        rank = best[0]
        for idx, k in enumerate((1, 5, 10)):
            text_hits[idx] += rank < k

    image_hits = np.zeros(3)
    for j in range(n_cap):
        order = np.argsort(-scores[:, j], kind="stable")
        rank = int(np.flatnonzero(order == caption_image[j])[0])
        for idx, k in enumerate((1, 5, 10)):
            image_hits[idx] += rank < k

    text = 100.0 * text_hits / n_img
    image = 100.0 * image_hits / n_cap
    return EvalResult(text[0], text[1], text[2], image[0], image[1], image[2])


def embed_for_retrieval(state: TrainState, data: PairedDataset):
    """Instance and concept embeddings for every unique image and caption."""
    model = state.model
    image_ids, img_seqs, caption_image = _unique_images(data.records)
    cap_seqs = [r.caption_features for r in data.records]
    v = _embed_chunked(model.embed_images, img_seqs)
    w = _embed_chunked(model.embed_captions, cap_seqs)
    basis = model.concept_basis()
    vc = _embed_chunked(lambda s: model.concept_embed(
        model.embed_images(s), basis, "visual")[0], img_seqs)
    wc = _embed_chunked(lambda s: model.concept_embed(
        model.embed_captions_concept(s), basis, "textual")[0], cap_seqs)
    return image_ids, caption_image, v, w, vc, wc


def evaluate(state: TrainState, data: PairedDataset, beta: float | None = None) -> EvalResult:
    """Blend both branches' cosine similarities and score retrieval recalls."""
    if len(data) == 0:
        raise ValueError("evaluation split is empty")
    beta = state.config.beta if beta is None else beta
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    _, caption_image, v, w, vc, wc = embed_for_retrieval(state, data)
    scores = beta * (v @ w.T) + (1.0 - beta) * (vc @ wc.T)
    return recalls_from_similarity(scores, caption_image)


def blended_similarity(v_inst, w_inst, v_concept, w_concept, beta: float) -> float:
    """beta-weighted sum of instance-level and concept-level cosine similarity."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")

    def cos(a, b) -> float:
        a = np.asarray(a.value if isinstance(a, Matrix) else a, dtype=np.float64).ravel()
        b = np.asarray(b.value if isinstance(b, Matrix) else b, dtype=np.float64).ravel()
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

    return beta * cos(v_inst, w_inst) + (1.0 - beta) * cos(v_concept, w_concept)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(blob: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(blob["data"]), dtype="<f8")
    return arr.reshape(blob["shape"]).copy()


def save_checkpoint(path, state: TrainState, which: str = "best") -> None:
    """Serialize parameters, momentum mirror, config, and concept assets.

    ``which="best"`` uses the best-validation snapshot when one exists,
    otherwise the current parameters.
    """
    if which not in ("best", "final"):
        raise ValueError("which must be 'best' or 'final'")
    params = {name: m.value for name, m in state.model.param_items()}
    epoch = state.epochs_run
    if which == "best" and state.best is not None:
        params = state.best["params"]
        epoch = state.best["epoch"]
    blob = {
        "version": CHECKPOINT_VERSION,
        "seed": state.config.seed,
        "epoch": epoch,
        "config": asdict(state.config),
        "dims": {"d_img": state.model.d_img, "d_txt": state.model.d_txt},
        "params": {name: _encode(arr) for name, arr in params.items()},
        "momentum": {name: _encode(arr) for name, arr in state.model.encoder_pair.momentum.items()},
        "concepts": {
            "tokens": state.model.vocab.concepts,
            "x_seed": state.model.vocab.seed,
            "embed_dim": int(state.model.vocab.init_embeddings.shape[1]),
            "adjacency": state.model.adjacency.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_checkpoint(path) -> TrainState:
    """Rebuild a state whose evaluation reproduces the saved one bit-for-bit."""
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    cfg = TrainConfig.from_dict(blob["config"])
    concepts = blob["concepts"]
    vocab = kn.ConceptVocabulary(
        list(concepts["tokens"]),
        kn.concept_embeddings(len(concepts["tokens"]), int(concepts["embed_dim"]),
                              int(concepts["x_seed"])),
        int(concepts["x_seed"]),
    )
    model = AlignmentModel(cfg, int(blob["dims"]["d_img"]), int(blob["dims"]["d_txt"]),
                           vocab, np.asarray(concepts["adjacency"], dtype=np.int64))
    for name, enc in blob["params"].items():
        model.set_param(name, Matrix(_decode(enc)))
    model.encoder_pair = EncoderPair({"vis": model.vis_agg.p, "txt": model.txt_agg.p})
    for name, enc in blob["momentum"].items():
        model.encoder_pair.momentum[name] = _decode(enc)
    adam = {name: AdamState(m.rows, m.cols, cfg.lr) for name, m in model.param_items()}
    state = TrainState(cfg, model, adam,
                       MemoryBank(cfg.bank_capacity, cfg.embed_dim),
                       MemoryBank(cfg.bank_capacity, cfg.embed_dim))
    state.epochs_run = int(blob["epoch"])
    return state
