# experiments/workflows.py
"""
Run bookkeeping and the workflows behind the management commands. Every
workflow takes a validated RunConfig plus an Artifacts directory and
returns a JSON-ready summary; every file it writes is registered so that
the run manifest lists all outputs.
"""

import json
import logging
import os
import time
from pathlib import Path

import pandas as pd
from django.utils import timezone

from segmentation.augment import augment_dataset
from segmentation.contrast import contrast_report
from segmentation.exceptions import CheckpointError, ConfigError, FormatError
from segmentation.metrics import EvalReport, evaluate_sample, localization_report
from segmentation.phantom import generate_dataset, load_dataset, save_dataset, split_dataset
from segmentation.pipeline import (
    build_patch_dataset,
    build_slice_dataset,
    build_volume_dataset,
    component_centers,
    fuse_axis_predictions,
    predict_volume_2d,
    prepare_sample,
    run_end_to_end,
)
from segmentation.unet import Network, build_unet2d, build_unet3d, fit, load_checkpoint, param_count
from segmentation.volume import load_volume, save_volume
from .models import ExperimentCell, MatrixEnum, Run, RunEvent, RunEventTypeEnum, RunStatusEnum
from .runconfig import RunConfig
from .serializers import ExperimentCellSerializer

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'

# Cell label -> RunConfig overrides. `axes` is not a config key: it selects
# the 2D path and the axes whose predictions are fused.
MATRICES = {
    MatrixEnum.MODALITIES: [
        ('opp-wat-fat-inn', {'modalities': 'fat,inn,opp,wat'}),
        ('opp-wat-fat', {'modalities': 'fat,opp,wat'}),
        ('opp-wat-inn', {'modalities': 'inn,opp,wat'}),
        ('opp-wat', {'modalities': 'opp,wat'}),
    ],
    MatrixEnum.AUGMENTATION: [
        ('augmented', {'augment': True}),
        ('not-augmented', {'augment': False}),
    ],
    MatrixEnum.AXES: [
        ('x', {'axes': ['x']}),
        ('y', {'axes': ['y']}),
        ('z', {'axes': ['z']}),
        ('all', {'axes': ['x', 'y', 'z']}),
    ],
}


def _json(data):
    return json.dumps(data, indent=2, sort_keys=True, default=str) + '\n'


class Artifacts:
    """A directory of run outputs; children register into their parent with a path prefix."""

    def __init__(self, root, parent=None, prefix=''):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.parent = parent
        self.prefix = prefix
        self.files = set()

    def child(self, name):
        return Artifacts(self.root / name, parent=self, prefix=name)

    def register(self, name):
        name = str(name)
        if self.parent is not None:
            self.parent.register(f"{self.prefix}/{name}")
        else:
            self.files.add(name)
        return self.root / name

    def path(self, name):
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def write_text(self, name, text):
        self.path(name).write_text(text)
        return self.register(name)

    def write_json(self, name, data):
        return self.write_text(name, _json(data))

    def write_volume(self, name, volume):
        save_volume(volume, self.path(name))
        return self.register(name)

    def write_excel(self, name, frame):
        frame.to_excel(self.path(name), index=False, engine='openpyxl')
        return self.register(name)

    def register_tree(self, name):
        """Register every file below the subdirectory `name`."""
        for path in sorted((self.root / name).rglob('*')):
            if path.is_file():
                self.register(path.relative_to(self.root).as_posix())

    def include(self, name):
        """Adopt the files listed by the manifest of subdirectory `name`."""
        manifest = self.root / name / MANIFEST
        if not manifest.exists():
            return
        for file in json.loads(manifest.read_text()).get('files', []):
            self.register(f"{name}/{file}")
        self.register(f"{name}/{MANIFEST}")

    def write_manifest(self, **extra):
        manifest = {'files': sorted(self.files), **extra}
        self.path(MANIFEST).write_text(_json(manifest))
        return manifest


class RunContext:
    """A Run row plus its directory `<run_root>/<command>-<hash12>-<UTC timestamp>`."""

    def __init__(self, run, config, artifacts):
        self.run = run
        self.config = config
        self.artifacts = artifacts

    @classmethod
    def start(cls, command, config):
        stamp = timezone.now().strftime('%Y%m%dT%H%M%S%fZ')
        run_dir = config.root / f"{command.value}-{config.hash[:12]}-{stamp}"
        artifacts = Artifacts(run_dir)
        artifacts.write_text('config.cfg', config.text)
        run = Run.objects.create(
            command=command.name,
            config_hash=config.hash,
            config_text=config.text,
            run_dir=str(run_dir),
            seed=config.seed,
            status=RunStatusEnum.PROCESSING.name,
        )
        context = cls(run, config, artifacts)
        context.event(RunEventTypeEnum.RUN_STARTED, run_dir=str(run_dir))
        logger.info("Started %s run in %s", command.value, run_dir)
        return context

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, traceback):
        if exc is not None:
            self.fail(exc)
        return False

    def event(self, event_type, **details):
        RunEvent.objects.create(run=self.run, event_type=event_type.name, details=details)

    def complete(self, summary):
        self.run.manifest = self.artifacts.write_manifest(
            command=self.run.get_command_display(),
            config_hash=self.config.hash,
            summary=summary,
        )
        self.run.status = RunStatusEnum.COMPLETED.name
        self.run.save()
        self.event(RunEventTypeEnum.RUN_COMPLETED, files=len(self.run.manifest['files']))

    def fail(self, exc):
        details = exc.as_dict() if hasattr(exc, 'as_dict') else {'message': str(exc)}
        # numpy scalars in error context become plain JSON values
        details = json.loads(_json(details))
        self.run.manifest = self.artifacts.write_manifest(
            command=self.run.get_command_display(),
            config_hash=self.config.hash,
            error=details,
        )
        self.run.status = RunStatusEnum.FAILED.name
        self.run.save()
        self.event(RunEventTypeEnum.RUN_FAILED, **details)
        logger.error("Run %s failed: %s", self.run.run_dir, exc)


# --- Data ---

def _workers(config):
    return (os.cpu_count() or 1) if config.mode == 'fast' else 1


def load_samples(config):
    """-> (train, validation) from the configured dataset directory or the phantom."""
    if config.dataset:
        directory = Path(config.dataset)
        if not directory.is_dir():
            raise ConfigError(f"Dataset directory {directory} does not exist.", field='dataset')
        return load_dataset(directory, 'train'), load_dataset(directory, 'validation')
    samples = generate_dataset(config.phantom_samples, config.phantom(), seed=config.seed)
    return split_dataset(samples, config.phantom_validation)


def training_samples(config):
    train, validation = load_samples(config)
    if config.augment and config.augment_copies:
        train = augment_dataset(
            train,
            config.augment_copies,
            config.augment_bounds(),
            seed=config.seed,
            workers=_workers(config),
        )
    return train, validation


def load_network(path):
    """A checkpoint file, or a run directory holding best.mck."""
    path = Path(path)
    if path.is_dir():
        path = path / 'best.mck'
    if not path.is_file():
        raise CheckpointError(f"Checkpoint {path} does not exist.", field='checkpoint')
    network, _, _ = load_checkpoint(path)
    return network


# --- Workflows ---

def phantom_workflow(config, artifacts):
    samples = generate_dataset(config.phantom_samples, config.phantom(), seed=config.seed)
    save_dataset(samples, artifacts.path('dataset'), config.phantom_validation, config.phantom())
    artifacts.register_tree('dataset')
    return {'samples': len(samples), 'validation': config.phantom_validation, 'dataset': str(artifacts.root / 'dataset')}


def contrast_workflow(config, artifacts):
    train, validation = load_samples(config)
    frames = []
    for sample in train + validation:
        frame = contrast_report(sample).to_frame()
        frame.insert(0, 'sample_id', sample.sample_id)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    artifacts.write_text('contrast.csv', table.to_csv(index=False, float_format='%.6g', lineterminator='\n'))
    mean_weber = table.groupby('modality', sort=True)['weber'].mean()
    return {'samples': len(frames), 'mean_weber': {name: round(float(value), 6) for name, value in mean_weber.items()}}


def augment_workflow(config, artifacts):
    train, validation = load_samples(config)
    augmented = augment_dataset(train, config.augment_copies, config.augment_bounds(), seed=config.seed, workers=_workers(config))
    save_dataset(augmented + validation, artifacts.path('dataset'), len(validation))
    artifacts.register_tree('dataset')
    listing = pd.DataFrame(
        [[sample.sample_id, ' | '.join(sample.notes)] for sample in augmented],
        columns=['sample_id', 'operations'],
    )
    artifacts.write_text('augment.csv', listing.to_csv(index=False, lineterminator='\n'))
    return {'train': len(augmented), 'validation': len(validation), 'dataset': str(artifacts.root / 'dataset')}


def _fit_and_record(network, data, validation, config, artifacts, dims, resume=None):
    cfg = config.train(dims, checkpoint_dir=artifacts.root)
    result = fit(network, data, cfg, validation=validation or None, resume=resume)
    artifacts.write_text('history.csv', result.history_csv())
    for name in ('best.mck', 'last.mck'):
        if (artifacts.root / name).exists():
            artifacts.register(name)
    return {
        'epochs': len(result.history),
        'best_epoch': result.best_epoch,
        'best_val_loss': result.best_val_loss,
        'stopped_early': result.stopped_early,
        'parameters': param_count(network),
    }


def train_workflow(config, artifacts, stage, resume=None):
    """Train the localizer (`loc`) or the patch segmenter (`seg`)."""
    train, validation = training_samples(config)
    modalities = config.modalities
    if stage == 'loc':
        data = build_volume_dataset(train, modalities, config.localizer_downsample)
        held_out = build_volume_dataset(validation, modalities, config.localizer_downsample)
    elif stage == 'seg':
        data = build_patch_dataset(train, modalities, min_region_voxels=config.min_region_voxels)
        held_out = build_patch_dataset(validation, modalities, min_region_voxels=config.min_region_voxels)
    else:
        raise ConfigError(f"Unknown stage {stage!r}.", field='stage')
    if not data:
        raise ConfigError("No training data for this stage.", field='dataset')
    network = Network(build_unet3d(len(modalities), config.base_channels, config.dropout), seed=config.seed)
    summary = _fit_and_record(network, data, held_out, config, artifacts, dims=3, resume=resume)
    return {'stage': stage, 'modalities': list(modalities), **summary}


def predict_workflow(config, artifacts, localizer, segmenter):
    """Segment the validation samples end to end; writes pred/, gt/ and instances.json."""
    _, validation = load_samples(config)
    if not validation:
        raise ConfigError("There are no validation samples to predict.", field='phantom_validation')
    records = []
    for sample in validation:
        prediction, instances = run_end_to_end(sample, localizer, segmenter, config.pipeline())
        artifacts.write_volume(f"pred/{sample.sample_id}_pred.mvl", prediction)
        artifacts.write_volume(f"gt/{sample.sample_id}_label.mvl", sample.label)
        records += [{'sample_id': sample.sample_id, 'disc_index': i.index, 'center': list(i.center)} for i in instances]
    artifacts.write_json('instances.json', records)
    return {'samples': len(validation), 'discs': len(records)}


def slice2d_workflow(config, artifacts, axes, checkpoint=None):
    """Train (or load) one 2D network per axis, predict the validation volumes and fuse the axes."""
    train, validation = training_samples(config)
    if not validation:
        raise ConfigError("There are no validation samples to predict.", field='phantom_validation')
    modalities = config.modalities
    stacked = config.mode == 'fast'
    probabilities = {sample.sample_id: [] for sample in validation}
    trained = {}
    for axis in axes:
        stage = artifacts.child(axis)
        if checkpoint is not None:
            network = load_network(checkpoint)
        else:
            data = build_slice_dataset(train, modalities, axis, config.slice_size)
            held_out = build_slice_dataset(validation, modalities, axis, config.slice_size)
            network = Network(build_unet2d(len(modalities), config.base_channels_2d), seed=config.seed)
            trained[axis] = _fit_and_record(network, data, held_out, config, stage, dims=2)
        for sample in validation:
            prepared = prepare_sample(sample, modalities)
            prob = predict_volume_2d(prepared, network, axis, config.slice_size, stacked)
            stage.write_volume(f"{sample.sample_id}_prob.mvl", prob)
            probabilities[sample.sample_id].append(prob)

    for sample in validation:
        prediction = fuse_axis_predictions(probabilities[sample.sample_id], config.threshold)
        artifacts.write_volume(f"pred/{sample.sample_id}_pred.mvl", prediction)
        artifacts.write_volume(f"gt/{sample.sample_id}_label.mvl", sample.label)
    return {'axes': list(axes), 'training': trained, **evaluate_artifacts(artifacts, artifacts.root)}


def _pairs_in(directory):
    """(sample_id, pred path, gt path) for every pred/<id>_pred.mvl below `directory`."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"Run directory {directory} does not exist.", field='run')
    pairs = []
    for path in sorted((directory / "pred").glob('*_pred.mvl')):
        sample_id = path.name[: -len('_pred.mvl')]
        pairs.append((sample_id, path, directory / 'gt' / f"{sample_id}_label.mvl"))
    if not pairs:
        raise FormatError(f"No predictions found in {directory}.", field='run')
    return pairs


def _localization(directory, sample_id, gt, spacing):
    instances = Path(directory) / 'instances.json'
    if not instances.exists():
        return None
    centers = [record['center'] for record in json.loads(instances.read_text()) if record['sample_id'] == sample_id]
    return localization_report(centers, component_centers(gt), spacing)


def evaluate_artifacts(artifacts, source=None, pred=None, gt=None):
    """
    Evaluate a prediction directory (pred/ + gt/ as written by predict and
    slice2d) or one explicit pred/gt pair. Writes report.csv, discs.json and
    summary.json into `artifacts`.
    """
    if source is not None:
        source = Path(source)
        pairs = _pairs_in(source)
    else:
        pairs = [(Path(pred).stem, Path(pred), Path(gt))]

    reports, localization = [], {}
    for sample_id, pred_path, gt_path in pairs:
        if not gt_path.is_file():
            raise FormatError(f"Ground truth {gt_path} is missing.", field='gt')
        prediction, truth = load_volume(pred_path), load_volume(gt_path)
        reports.append(evaluate_sample(prediction, truth, sample_id=sample_id))
        if source is not None:
            located = _localization(source, sample_id, truth, truth.spacing)
            if located is not None:
                localization[sample_id] = located.as_dict()

    report = EvalReport.merge(reports)
    artifacts.write_text('report.csv', report.to_csv())
    artifacts.write_json('discs.json', report.disc_records())
    summary = {**report.aggregates(), 'samples': len(reports)}
    if localization:
        summary['localization'] = localization
    artifacts.write_json('summary.json', summary)
    return summary


# --- Experiments ---

def plan_experiment(context, matrix):
    """Create one PENDING ExperimentCell per configuration of the requested matrices."""
    matrices = list(MATRICES) if matrix == 'all' else [MatrixEnum[matrix.upper()]]
    cells = []
    for name in matrices:
        for label, settings in MATRICES[name]:
            cells.append(ExperimentCell.objects.create(run=context.run, matrix=name.name, label=label, settings=settings))
    return cells


def execute_cell(cell):
    """Run one matrix cell into `<run_dir>/cells/<matrix>-<label>`; -> EvalReport aggregates."""
    settings = dict(cell.settings)
    axes = settings.pop('axes', None)
    config = RunConfig.from_text(cell.run.config_text).override(**settings)
    artifacts = Artifacts(Path(cell.run.run_dir) / 'cells' / cell_directory(cell))
    artifacts.write_text('config.cfg', config.text)
    try:
        if axes:
            summary = slice2d_workflow(config, artifacts, axes)
        else:
            train_workflow(config, artifacts.child('localizer'), 'loc')
            train_workflow(config, artifacts.child('segmenter'), 'seg')
            localizer = load_network(artifacts.root / 'localizer')
            segmenter = load_network(artifacts.root / 'segmenter')
            predict_workflow(config, artifacts, localizer, segmenter)
            summary = evaluate_artifacts(artifacts, artifacts.root)
    finally:
        artifacts.write_manifest(matrix=cell.matrix, label=cell.label, config_hash=config.hash)
    return summary


def cell_directory(cell):
    return f"{cell.matrix.lower()}-{cell.label}"


def augmentation_gain(cells):
    """Mean Dice of the augmented cell minus the not-augmented one, when both completed."""
    dice = {
        cell.label: cell.mean_dice
        for cell in cells
        if cell.matrix == MatrixEnum.AUGMENTATION.name and cell.status == RunStatusEnum.COMPLETED.name
    }
    if dice.get('augmented') is None or dice.get('not-augmented') is None:
        return None
    return round(dice['augmented'] - dice['not-augmented'], 6)


def collect_experiment(context, cells):
    """Write results.csv / results.xlsx from the finished cells and adopt their files."""
    for cell in cells:
        cell.refresh_from_db()
        context.artifacts.include(f"cells/{cell_directory(cell)}")
    serializer = ExperimentCellSerializer(cells, many=True)
    frame = pd.DataFrame(serializer.data, columns=list(ExperimentCellSerializer.Meta.fields))
    context.artifacts.write_text('results.csv', frame.to_csv(index=False, float_format='%.4f', lineterminator='\n'))
    context.artifacts.write_excel('results.xlsx', frame)
    completed = sum(1 for cell in cells if cell.status == RunStatusEnum.COMPLETED.name)
    summary = {'cells': len(cells), 'completed': completed, 'failed': len(cells) - completed}
    gain = augmentation_gain(cells)
    if gain is not None:
        summary['augmentation_gain'] = gain
    return summary


def timed(function, *args, **kwargs):
    start = time.perf_counter()
    result = function(*args, **kwargs)
    return result, time.perf_counter() - start
