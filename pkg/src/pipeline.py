"""
Pipeline - Artifact-level stages shared by the CLI and the experiment runner

Each stage reads its inputs through the ArtifactManager of one working
directory, so a missing upstream artifact surfaces as a DependencyError that
names the subcommand producing it.
"""
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from artifact_manager import ArtifactManager, ranker_artifact, tensor_hash
from config_manager import EncoderConfig, RunConfig, resolve_variant
from content_baselines import StaticMapper, content_features
from content_encoder import ContentEncoder, EncoderChainKernel
from corpus_generator import Corpus, InteractionSet, generate_corpus, load_corpus, save_corpus, split_train_eval
from ctr_ranker import VARIANT_WIRING, CTRRanker, ItemFeatures, RankerResult, RankerV5Kernel, train_ranker
from diff_kernels import KERNELS, GradReport, grad_check
from errors import ArtifactMismatchError, IDProxyError, PreconditionError, ProxyNotFoundError
from fine_adaptor import FineAdaptor, emit_fine_proxies
from layer_partitioner import LayerPartition, PooledCache, build_pooled_cache, partition_layers
from log_manager import LogManager
from metrics import auc, cluster_silhouette, project_2d
from proxy_aligner import IdEmbeddingTable, alignment_metrics, preprocess_id_table, train_stage1
from proxy_store import ProxyRecord, ProxyStore, batch_generate, manifest_path, write_proxies
from run_tracker import RunTracker

SPLITS = ('warm', 'cold', 'global')
SERVABLE_VARIANTS = ('v3_coarse', 'v5_structure_reuse')
VIZ_TABLES = ('id', 'coarse', 'fine')


@dataclass
class EvalResult:
    """AUC per split plus the scored interaction sets."""

    variant: str
    aucs: Dict[str, float]
    sets: Dict[str, InteractionSet] = field(default_factory=dict)
    scores: Dict[str, np.ndarray] = field(default_factory=dict)


def _remove_store(path: str):
    for stale in (path, manifest_path(path)):
        if os.path.exists(stale):
            os.remove(stale)


class Pipeline:
    """The pipeline stages of one working directory under one run configuration."""

    def __init__(self, config: RunConfig, workdir: str, tracker: Optional[RunTracker] = None):
        self.config = config
        self.workdir = workdir
        self.artifacts = ArtifactManager(workdir)
        self.tracker = tracker
        self.config_hash = config.config_hash()
        self.log_manager = LogManager()
        self._corpus: Optional[Corpus] = None

    def _produced(self, name: str):
        if self.tracker is not None:
            self.tracker.record_artifact(name)

    # -- corpus --------------------------------------------------------------

    def gen_data(self) -> Dict:
        """Generate and save the corpus (gen-data)."""
        corpus = generate_corpus(self.config.generation)
        meta = save_corpus(corpus, self.artifacts.path_for('corpus'))
        self.artifacts.register('corpus', self.config_hash)
        self._produced('corpus')
        self._corpus = corpus
        summary = {'n_items': corpus.n_items, 'n_users': corpus.n_users,
                   'n_interactions': meta['n_interactions'],
                   'n_cold_items': int(corpus.cold_mask.sum()),
                   'content_hash': meta['content_hash']}
        self.log_manager.log_info('corpus generated', details=summary)
        return summary

    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = load_corpus(self.artifacts.require('corpus'))
        return self._corpus

    def id_table(self, corpus: Corpus) -> IdEmbeddingTable:
        """Preprocessed ID targets of the warm items."""
        cold = corpus.cold_mask
        raw = {i: entry for i, entry in corpus.raw_id_entries().items() if not cold[i]}
        return preprocess_id_table(raw, self.config.stage1.tau)

    # -- stage 1 -------------------------------------------------------------

    def _save_encoder(self, name: str, encoder: ContentEncoder):
        meta = {'encoder_hash': encoder.parameter_hash(),
                'config': dataclasses.asdict(encoder.config)}
        self.artifacts.save_tensors(name, encoder.params, self.config_hash, meta)
        self._produced(name)

    def load_encoder(self, name: str = 'encoder') -> ContentEncoder:
        """Encoder checkpoint, verified against the hash recorded when it was saved."""
        tensors, _, meta = self.artifacts.load_tensors(name)
        encoder = ContentEncoder(EncoderConfig(**meta['config']), params=tensors)
        if encoder.parameter_hash() != meta['encoder_hash']:
            raise ArtifactMismatchError(f"{name} parameters do not match their recorded hash")
        return encoder

    def encoder_hash(self) -> str:
        _, _, meta = self.artifacts.load_tensors('encoder')
        return meta['encoder_hash']

    def train_stage1(self) -> Dict:
        """Align the encoder with the ID space and store a coarse proxy per item (train-stage1)."""
        corpus = self.corpus()
        table = self.id_table(corpus)
        result = train_stage1(corpus, table, self.config.stage1, self.config.encoder)
        self._save_encoder('encoder', result.encoder)
        self._save_encoder('encoder_init', result.initial_encoder)
        self.artifacts.save_tensors('id_targets', {'item_ids': table.item_ids, 'vectors': table.vectors},
                                    self.config_hash, {'tau': table.tau, 'n_filtered': table.n_filtered})
        self._produced('id_targets')

        stage1_hash = result.encoder.parameter_hash()
        path = self.artifacts.path_for('coarse_proxies')
        _remove_store(path)
        records = [ProxyRecord(item_id=i, p_coarse=result.coarse[i], stage1_hash=stage1_hash)
                   for i in range(corpus.n_items)]
        write_proxies(records, path, stage1_hash=stage1_hash)
        self.artifacts.register('coarse_proxies', self.config_hash)
        self._produced('coarse_proxies')

        metrics = alignment_metrics(result.coarse, table)
        metrics['final_loss'] = result.loss_history[-1]
        self.artifacts.save_json('stage1_metrics', metrics, self.config_hash)
        self._produced('stage1_metrics')
        self.log_manager.log_evaluation(
            f"stage1 alignment: top1={metrics['top1']:.3f} mean_cosine={metrics['mean_cosine']:.3f}",
            metrics)
        return metrics

    def coarse_matrix(self) -> np.ndarray:
        """Coarse proxy of every item, rows indexed by item id."""
        store = ProxyStore.open(self.artifacts.require('coarse_proxies'))
        n_items = self.corpus().n_items
        coarse = np.zeros((n_items, store.d))
        for item_id in range(n_items):
            if item_id not in store:
                raise ProxyNotFoundError(item_id, 'coarse')
            coarse[item_id] = store.lookup(item_id).p_coarse
        return coarse

    # -- stage 2 -------------------------------------------------------------

    def partition_layers(self) -> LayerPartition:
        """Pick three representative layers and cache their pooled states (partition-layers)."""
        encoder = self.load_encoder('encoder')
        corpus = self.corpus()
        cfg = self.config.stage2
        warm = corpus.warm_item_ids()
        rng = np.random.default_rng(cfg.seed)
        probe_ids = np.sort(rng.choice(warm, size=min(cfg.probe_size, len(warm)), replace=False))
        partition = partition_layers(encoder, [corpus.items[i] for i in probe_ids], k=cfg.n_groups,
                                     seed=cfg.seed, max_iters=cfg.kmeans_max_iters)
        encoder_hash = encoder.parameter_hash()
        self.artifacts.save_json('partition', {**partition.to_dict(), 'encoder_hash': encoder_hash},
                                 self.config_hash)
        self._produced('partition')

        cache = build_pooled_cache(encoder, corpus.items, partition)
        self.artifacts.save_tensors('pooled_cache', cache.to_tensors(), self.config_hash,
                                    {'encoder_hash': encoder_hash})
        self._produced('pooled_cache')
        self.log_manager.log_info(f"layer partition: {list(partition.layers)}",
                                  details={'assignments': partition.assignments})
        return partition

    def load_partition(self) -> LayerPartition:
        return LayerPartition.from_dict(self.artifacts.load_json('partition'))

    def load_pooled_cache(self) -> PooledCache:
        tensors, _, meta = self.artifacts.load_tensors('pooled_cache')
        cache = PooledCache.from_tensors(tensors, meta['encoder_hash'])
        if cache.encoder_hash != self.encoder_hash():
            raise ArtifactMismatchError('pooled cache was built from another encoder; '
                                        're-run partition-layers')
        return cache

    def train_stage2(self) -> Dict:
        """Train the adaptor jointly with the v5 ranker and store fine proxies (train-stage2)."""
        self.artifacts.require('coarse_proxies')
        self.artifacts.require('pooled_cache')
        encoder_hash = self.encoder_hash()
        result = self.train_ranker('v5_structure_reuse')
        if self.encoder_hash() != encoder_hash:
            raise ArtifactMismatchError('encoder changed during stage-2 training')
        adaptor = result.adaptor
        stage2_hash = tensor_hash(adaptor.state_dict())
        self.artifacts.save_tensors('adaptor', adaptor.state_dict(), self.config_hash,
                                    {**adaptor.meta(), 'encoder_hash': encoder_hash})
        self._produced('adaptor')

        corpus = self.corpus()
        coarse = self.coarse_matrix()
        pooled = self.load_pooled_cache().states
        ids = list(range(corpus.n_items))
        fine = emit_fine_proxies(ids, pooled, coarse, adaptor)
        path = self.artifacts.path_for('fine_proxies')
        _remove_store(path)
        records = [ProxyRecord(item_id=i, p_coarse=coarse[i], p_fine=fine[i],
                               stage1_hash=encoder_hash, stage2_hash=stage2_hash) for i in ids]
        write_proxies(records, path, stage1_hash=encoder_hash, stage2_hash=stage2_hash)
        self.artifacts.register('fine_proxies', self.config_hash)
        self._produced('fine_proxies')

        gate = adaptor.gate(pooled, coarse)
        cold = corpus.cold_mask
        summary = {'final_loss': result.loss_history[-1],
                   'gate_mean_warm': float(gate[~cold].mean()),
                   'gate_mean_cold': float(gate[cold].mean()),
                   'adaptor_params': adaptor.param_count(),
                   'ranker_params': result.ranker.param_count()}
        self.log_manager.log_evaluation('stage2 trained', summary)
        return summary

    # -- ranker --------------------------------------------------------------

    def item_features(self, variant: str, mapper: Optional[StaticMapper] = None) -> ItemFeatures:
        """Item-side inputs the variant reads, each indexed by item id."""
        aux_source, fine_usage = VARIANT_WIRING[variant]
        corpus = self.corpus()
        features = ItemFeatures(n_items=corpus.n_items)
        if aux_source in ('content', 'static'):
            z = content_features(self.load_encoder('encoder_init'), corpus.items)
            if aux_source == 'content':
                features.content = z
            else:
                features.static = mapper.predict(z)
        if aux_source == 'coarse' or fine_usage:
            features.coarse = self.coarse_matrix()
        if fine_usage:
            features.pooled = self.load_pooled_cache().states
        return features

    def fit_static_mapper(self) -> StaticMapper:
        corpus = self.corpus()
        cfg = self.config.ranker
        z = content_features(self.load_encoder('encoder_init'), corpus.items)
        mapper = StaticMapper(z.shape[1], cfg.d, seed=cfg.seed)
        mapper.fit(z, self.id_table(corpus), cfg.static_epochs, cfg.static_lr, cfg.weight_decay)
        self.artifacts.save_tensors('static_mapper', mapper.state_dict(), self.config_hash,
                                    {'final_loss': mapper.loss_history[-1]})
        self._produced('static_mapper')
        return mapper

    def train_ranker(self, variant: str) -> RankerResult:
        """Train one ranker variant and checkpoint it with its adaptor (train-ranker)."""
        variant = resolve_variant(variant)
        _, fine_usage = VARIANT_WIRING[variant]
        corpus = self.corpus()
        train, _, _ = split_train_eval(corpus)
        mapper = self.fit_static_mapper() if variant == 'v2_mlp_map' else None
        features = self.item_features(variant, mapper)

        adaptor = None
        if fine_usage:
            s2 = self.config.stage2
            adaptor = FineAdaptor(d_hidden=self.config.encoder.d_hidden, d=self.config.ranker.d,
                                  d_fine=s2.d_fine, adaptor_hidden=s2.adaptor_hidden, seed=s2.seed,
                                  layers=self.load_partition().layers)
        cfg = dataclasses.replace(self.config.ranker, variant=variant)
        result = train_ranker(train, features, cfg, corpus.n_users,
                              d_content=self.config.encoder.d_hidden, adaptor=adaptor)

        tensors = result.ranker.state_dict()
        meta = {'ranker': result.ranker.meta(), 'loss_history': result.loss_history}
        if result.adaptor is not None:
            tensors.update({f"adaptor.{k}": v for k, v in result.adaptor.state_dict().items()})
            meta['adaptor'] = result.adaptor.meta()
        name = ranker_artifact(variant)
        self.artifacts.save_tensors(name, tensors, self.config_hash, meta)
        self._produced(name)
        return result

    def load_ranker(self, variant: str) -> Tuple[CTRRanker, Optional[FineAdaptor]]:
        tensors, _, meta = self.artifacts.load_tensors(ranker_artifact(variant))
        ranker_tensors = {k: v for k, v in tensors.items() if not k.startswith('adaptor.')}
        ranker = CTRRanker.from_state_dict(self.config.ranker, ranker_tensors, meta['ranker'])
        adaptor = None
        if meta.get('adaptor'):
            adaptor_tensors = {k[len('adaptor.'):]: v for k, v in tensors.items() if k.startswith('adaptor.')}
            adaptor = FineAdaptor.from_state_dict(adaptor_tensors, meta['adaptor'])
        return ranker, adaptor

    def evaluate(self, variant: str, splits: Sequence[str] = SPLITS, serve: bool = False,
                 write_scores: bool = True) -> EvalResult:
        """
        AUC of a trained variant on the requested evaluation splits (eval).

        Args:
            variant: Ranker variant
            splits: Any of warm, cold, global
            serve: Read proxies from the fine-proxy store instead of recomputing
                them with the checkpoint's adaptor (v3 and v5 only)
            write_scores: Dump per-interaction scores to scores.jsonl

        Returns:
            EvalResult
        """
        variant = resolve_variant(variant)
        for split in splits:
            if split not in SPLITS:
                raise PreconditionError(f"unknown split '{split}' (expected one of {', '.join(SPLITS)})")
        ranker, adaptor = self.load_ranker(variant)
        if serve:
            if variant not in SERVABLE_VARIANTS:
                raise PreconditionError(f"serving path covers {', '.join(SERVABLE_VARIANTS)}, not {variant}")
            store = ProxyStore.open(self.artifacts.require('fine_proxies'))
            features = ItemFeatures.from_store(store, self.corpus().n_items, strict=False)
            adaptor = None
        else:
            mapper = None
            if variant == 'v2_mlp_map':
                tensors, _, _ = self.artifacts.load_tensors('static_mapper')
                mapper = StaticMapper.from_state_dict(tensors)
            features = self.item_features(variant, mapper)

        _, eval_warm, eval_cold = split_train_eval(self.corpus())
        available = {'warm': eval_warm, 'cold': eval_cold,
                     'global': InteractionSet.union(eval_warm, eval_cold)}
        result = EvalResult(variant=variant, aucs={})
        for split in splits:
            interactions = available[split]
            scores = ranker.predict_batch(interactions, features, adaptor)
            result.sets[split] = interactions
            result.scores[split] = scores
            result.aucs[split] = auc(scores, interactions.label)
            self.log_manager.log_evaluation(f"auc[{split}] {variant}: {result.aucs[split]:.4f}",
                                            {'variant': variant, 'split': split, 'auc': result.aucs[split],
                                             'n': len(interactions), 'serve': serve})
        if write_scores:
            self._write_scores(result)
        return result

    def _write_scores(self, result: EvalResult):
        directory = os.path.join(self.workdir, 'ranker', result.variant)
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, 'scores.jsonl')
        tmp_path = path + '.tmp'
        with open(tmp_path, 'w', encoding='utf-8') as f:
            for split, interactions in result.sets.items():
                for n, y_hat in enumerate(result.scores[split]):
                    f.write(json.dumps({'user_id': int(interactions.user_id[n]),
                                        'item_id': int(interactions.item_id[n]),
                                        'split': split, 'y_hat': float(y_hat),
                                        'y': int(interactions.label[n])}, separators=(',', ':')))
                    f.write('\n')
        os.replace(tmp_path, path)
        with open(os.path.join(directory, 'eval.json'), 'w', encoding='utf-8') as f:
            json.dump(result.aucs, f, indent=2, sort_keys=True)

    # -- deployment ----------------------------------------------------------

    def gen_proxies(self, append: bool = False) -> Dict:
        """
        Batch-generate proxies for the cold items into the serving store (gen-proxies).

        Without append the store is rewritten at version 1; with append a new
        version is added on top of the existing records.
        """
        encoder = self.load_encoder('encoder')
        tensors, _, meta = self.artifacts.load_tensors('adaptor')
        adaptor = FineAdaptor.from_state_dict(tensors, meta)
        corpus = self.corpus()
        path = self.artifacts.path_for('generated_proxies')
        version = 1
        if append and os.path.exists(path):
            latest = ProxyStore.open(path).latest_versions()
            version = max(latest.values(), default=0) + 1
        else:
            _remove_store(path)
        records = batch_generate([corpus.items[i] for i in corpus.cold_item_ids()], encoder, adaptor,
                                 meta, version=version)
        manifest = write_proxies(records, path, stage1_hash=encoder.parameter_hash(),
                                 stage2_hash=tensor_hash(adaptor.state_dict()))
        self.artifacts.register('generated_proxies', self.config_hash)
        self._produced('generated_proxies')
        return {'records': len(records), 'version': version, **manifest}

    # -- diagnostics ---------------------------------------------------------

    def viz(self, table: str = 'id') -> Dict:
        """2-D projection CSV of an embedding table plus 3-cluster silhouettes (viz)."""
        if table not in VIZ_TABLES:
            raise PreconditionError(f"unknown table '{table}' (expected one of {', '.join(VIZ_TABLES)})")
        corpus = self.corpus()
        if table == 'id':
            id_table = self.id_table(corpus)
            ids, vectors = id_table.item_ids, id_table.vectors
        elif table == 'coarse':
            ids = np.arange(corpus.n_items)
            vectors = self.coarse_matrix()
        else:
            records = list(ProxyStore.open(self.artifacts.require('fine_proxies')).records())
            ids = np.array([r.item_id for r in records], dtype=np.int64)
            vectors = np.stack([r.p_fine for r in records]).astype(np.float64)
        projection = project_2d(vectors, ids, corpus.topic_ids[ids])
        name = 'projection.csv' if table == 'id' else f"projection_{table}.csv"
        path = projection.write_csv(os.path.join(self.workdir, 'viz', name))
        seed = self.config.seed
        summary = {'table': table, 'path': path, 'n': int(len(ids)),
                   'silhouette_table': cluster_silhouette(vectors, 3, seed=seed),
                   'silhouette_2d': cluster_silhouette(projection.coords, 3, seed=seed),
                   'explained_variance': [float(v) for v in projection.explained_variance]}
        self.log_manager.log_evaluation(f"viz[{table}] silhouette={summary['silhouette_table']:.3f}", summary)
        return summary


# ----------------------------------------------------------------------------
# Gradient suite
# ----------------------------------------------------------------------------

def _unit_rows(rng: np.random.Generator, shape: Tuple[int, int]) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def gradcheck_point(kernel: str, seed: int) -> Tuple[List[np.ndarray], Dict]:
    """A random evaluation point (and constructor kwargs) for a registered kernel."""
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    if kernel == 'matmul':
        return [n((3, 4)), n((4, 2))], {}
    if kernel in ('add', 'elementwise_mul'):
        return [n((3, 4)), n((3, 4))], {}
    if kernel == 'concat':
        return [n((2, 3)), n((2, 2))], {}
    if kernel in ('softmax', 'log_softmax', 'sigmoid', 'relu', 'l2_normalize'):
        return [n((3, 5))], {}
    if kernel == 'layer_norm':
        return [n((3, 5)), 1.0 + 0.1 * n(5), 0.1 * n(5)], {}
    if kernel == 'cross_entropy_binary':
        return [rng.uniform(0.05, 0.95, size=6), rng.integers(0, 2, size=6).astype(np.float64)], {}
    if kernel == 'pal_loss':
        return [_unit_rows(rng, (4, 3)), _unit_rows(rng, (4, 3))], {'temperature': 0.5}
    if kernel == 'fine_adaptor':
        return [n((2, 4)), n((2, 4)), n((2, 4)), n((12, 5)), n(5), n((5, 3)), n(3)], {}
    if kernel == 'gate_fuse':
        return [_unit_rows(rng, (2, 3)), n((2, 3)), n((3, 3)), n((3, 6))], {}
    if kernel == 'target_attention':
        return [n((2, 3, 4)), n((2, 4)), n((4, 4)), n((4, 4)), n((4, 4))], {}
    if kernel == 'feature_interaction':
        # 3 fields of width 4, plain 2, 3 pairwise dots, 2 scalars
        return [n((2, 3, 4)), n((2, 2)), n((2, 2)), n((19, 6)) / 4.0, 0.1 * n(6), n((6, 5)) / 2.0, 0.1 * n(5)], {}
    if kernel == 'encoder_chain':
        return EncoderChainKernel.sample_point(seed), {'seed': seed}
    if kernel == 'ranker_v5':
        return RankerV5Kernel.sample_point(seed), {'seed': seed}
    raise PreconditionError(f"no gradient-suite point for kernel '{kernel}'")


def gradient_suite(n_points: int = 10, seed: int = 0, tolerance: float = 1e-4,
                   eps: float = 1e-5, kernels: Optional[Sequence[str]] = None) -> List[GradReport]:
    """
    grad_check every registered kernel at n_points random points.

    A point that cannot be built or evaluated yields a failed report carrying
    the error instead of aborting the suite.
    """
    log_manager = LogManager()
    reports = []
    for name in kernels or sorted(KERNELS):
        for k in range(n_points):
            try:
                point, kwargs = gradcheck_point(name, seed + k)
                report = grad_check(name, point, eps=eps, tolerance=tolerance, seed=seed + k,
                                    kernel_kwargs=kwargs)
            except IDProxyError as e:
                log_manager.log_error(e, f"grad_check {name}", {'point_seed': seed + k})
                report = GradReport(op_name=name, max_rel_err=float('inf'), tolerance=tolerance,
                                    passed=False, error=e.one_line())
            reports.append(report)
            if not report.passed:
                log_manager.log_warning(f"grad_check failed for {name}", category='EVALUATION',
                                        details=report.to_dict())
    return reports
