import dataclasses
import time
import typing

import humanfriendly
import numpy as np
import simplejson

import clients.logging
from . import config
from . import data
from . import errors
from . import evaluation
from . import losses
from . import model
from . import numerics
from . import sphere

# child seeds derived from the run seed, one per random consumer
_SEED_FRAME, _SEED_INIT, _SEED_SHUFFLE, _SEED_SPLIT, _SEED_NOISE = range(5)


def update_u_theta(history, warm_epochs, continuous=False):
    """
    Mean training-sample uncertainty over the recorded epochs, using only the first
    warm_epochs of them unless continuous is set. Clamped to [0, 1].

    :param history: one array of per-sample uncertainties per completed epoch
    """
    if not history:
        raise errors.DataError('u_theta needs at least one recorded epoch')

    epochs = history if continuous else history[:warm_epochs]
    values = np.concatenate([np.asarray(epoch, dtype=np.float64).reshape(-1) for epoch in epochs])
    if values.size == 0:
        return 0.0
    return float(np.clip(np.mean(values), 0.0, 1.0))


@dataclasses.dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    indices: typing.Tuple[int, ...]
    u_theta: typing.Optional[float]
    loss: float
    components: typing.Dict[str, float]

    def to_dict(self):
        return {
            'epoch': self.epoch,
            'step': self.step,
            'indices': list(self.indices),
            'u_theta': self.u_theta,
            'loss': self.loss,
            'components': dict(self.components),
        }


@dataclasses.dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    components: typing.Dict[str, float]
    u_theta: float
    auxiliaries_active: bool
    dev: typing.Optional[typing.Dict[str, float]] = None
    elapsed: float = 0.0

    def to_dict(self, include_timing=True):
        document = {
            'epoch': self.epoch,
            'train_loss': self.train_loss,
            'components': dict(self.components),
            'u_theta': self.u_theta,
            'auxiliaries_active': self.auxiliaries_active,
            'dev': self.dev,
        }
        if include_timing:
            document['elapsed'] = self.elapsed
        return document


@dataclasses.dataclass
class RunRecord:
    config: typing.Dict[str, typing.Any]
    epochs: typing.List[EpochRecord] = dataclasses.field(default_factory=list)
    steps: typing.List[StepRecord] = dataclasses.field(default_factory=list)
    test: typing.Optional[evaluation.CalibrationReport] = None
    low_frequency: typing.Optional[typing.Dict[str, typing.Any]] = None
    temperature: typing.Optional[evaluation.TemperatureFit] = None
    u_theta: typing.Optional[float] = None
    gram_penalty: typing.Optional[float] = None
    wall_clock: float = 0.0

    def to_dict(self, include_timing=True):
        document = {
            'config': self.config,
            'epochs': [epoch.to_dict(include_timing) for epoch in self.epochs],
            'steps': [step.to_dict() for step in self.steps],
            'test': self.test.to_dict() if self.test else None,
            'low_frequency': self.low_frequency,
            'temperature': self.temperature.to_dict() if self.temperature else None,
            'u_theta': self.u_theta,
            'gram_penalty': self.gram_penalty,
        }
        if include_timing:
            document['wall_clock'] = self.wall_clock
        return document


def _dev_metrics(report):
    return {
        'accuracy': report.accuracy,
        'f1': report.f1,
        'ece_classwise': report.ece_classwise,
        'ece_standard': report.ece_standard,
    }


def evaluate(
    trained,
    dataset,
    m_bins=evaluation.DEFAULT_BINS,
    temperature=None,
    u_theta=None,
    group_by='pred',
    parallel=1,
):
    """
    Forward pass over dataset and the full calibration report. Labels are matched to
    the model vocabulary by name. temperature is a TemperatureFit applied to the logits.
    """
    if dataset.n == 0:
        raise errors.DataError('Cannot evaluate on an empty dataset')
    dataset = dataset.remap(trained.vocab)

    logits = trained.predict_logits(dataset.texts, parallel=parallel)
    if temperature is not None:
        logits = evaluation.apply_temperature(logits, temperature.t)

    batch = losses.ProbBatch.from_logits(logits, dataset.labels)
    return evaluation.calibration_report(
        batch, m_bins, group_by=group_by, u_theta=u_theta, temperature=temperature
    )


def load_datasets(cfg):
    """
    Resolves the data section into (train, dev, test). Train label noise is injected
    after splitting, dev and test stay clean.
    """
    data_cfg = cfg.data
    seeds = numerics.spawn_seeds(cfg.seed, 5)

    if data_cfg.synth is not None:
        synth = data_cfg.synth
        full = data.synth_gaussian_text(
            synth.k,
            synth.n,
            synth.noise,
            seed=cfg.seed,
            decay=synth.decay,
            pool_size=synth.pool_size,
        )
    else:
        full = data.load_jsonl(data_cfg.train_path)

    if data_cfg.dev_path is None and data_cfg.test_path is None:
        train_ds, dev_ds, test_ds = data.split(
            full, data.SplitSpec(*data_cfg.split, seed=seeds[_SEED_SPLIT])
        )
    else:
        train_ds = full
        empty = data.Dataset((), full.vocab)
        dev_ds = empty
        if data_cfg.dev_path:
            dev_ds = data.load_jsonl(data_cfg.dev_path).remap(full.vocab)
        test_ds = empty
        if data_cfg.test_path:
            test_ds = data.load_jsonl(data_cfg.test_path).remap(full.vocab)

    train_ds = data.inject_noise(train_ds, data_cfg.train_noise, seeds[_SEED_NOISE])
    return train_ds, dev_ds, test_ds


class Trainer(object):
    def __init__(self, logger, cfg):
        self._logger = logger.get_child('trainer')
        self._cfg = cfg
        self._seeds = numerics.spawn_seeds(cfg.seed, 5)
        self._frame_optimizer = sphere.FrameOptimizer(
            self._logger, cfg.frame.optimizer_config(self._seeds[_SEED_FRAME])
        )

        self._logger.debug(
            'Initialized',
            seed=cfg.seed,
            head=cfg.model.head,
            loss=dataclasses.asdict(cfg.loss),
            optim=dataclasses.asdict(cfg.optim),
        )

    def build_model(self, vocab):
        """
        The untrained model for vocab. Deterministic given the run seed, including the
        frame, which is read from frame.path or optimized here.
        """
        model_cfg = self._cfg.model
        k = len(vocab)
        if k < 2:
            self._logger.log_and_raise(
                'error', 'Training needs at least 2 labels', k=k, exc_type=errors.DataError
            )

        frame = None
        if model_cfg.head == 'hyperspherical':
            frame = self._load_or_optimize_frame(k, model_cfg.h)

        return model.build_model(
            numerics.make_rng(self._seeds[_SEED_INIT]),
            model_cfg.featurizer(),
            vocab,
            head_type=model_cfg.head,
            frame=frame,
            scale_mode=model_cfg.scale_mode,
            d_embed=model_cfg.d_embed,
            hidden=model_cfg.hidden,
            h=model_cfg.h,
            final_activation=model_cfg.final_activation,
        )

    def fit(self, train_ds, dev_ds=None, test_ds=None):
        """
        Trains on train_ds and returns (model, RunRecord). dev_ds drives per-epoch metrics
        and the optional temperature fit, test_ds the final report.
        """
        cfg = self._cfg
        start_time = time.time()

        if train_ds.n == 0:
            self._logger.log_and_raise(
                'error', 'Training set is empty', exc_type=errors.DataError
            )

        trained = self.build_model(train_ds.vocab)
        record = RunRecord(config=cfg.to_dict())
        if trained.head_type == 'hyperspherical':
            record.gram_penalty = sphere.gram_penalty(trained.head.frame)

        self._logger.info(
            'Training',
            samples=train_ds.n,
            labels=train_ds.k,
            head=trained.head_type,
            epochs=cfg.optim.epochs,
        )

        features = trained.features(train_ds.texts, parallel=cfg.evaluation.parallel)
        labels = train_ds.labels
        shuffle_rng = numerics.make_rng(self._seeds[_SEED_SHUFFLE])

        history = []
        u_theta = None
        for epoch in range(1, cfg.optim.epochs + 1):
            epoch_start = time.time()
            auxiliaries_active = epoch > cfg.optim.u_theta_warm_epochs
            if auxiliaries_active and cfg.loss.uses_threshold:
                u_theta = update_u_theta(
                    history, cfg.optim.u_theta_warm_epochs, cfg.optim.u_theta_continuous
                )
            plan = cfg.loss if auxiliaries_active else cfg.loss.without_auxiliaries()

            epoch_uncertainties, totals = self._run_epoch(
                trained,
                features,
                labels,
                shuffle_rng.permutation(train_ds.n),
                plan,
                u_theta if plan.uses_threshold else None,
                epoch,
                record,
            )
            history.append(epoch_uncertainties)

            epoch_record = EpochRecord(
                epoch=epoch,
                train_loss=totals.pop('loss') / train_ds.n,
                components={name: value / train_ds.n for name, value in totals.items()},
                u_theta=update_u_theta(
                    history, cfg.optim.u_theta_warm_epochs, cfg.optim.u_theta_continuous
                ),
                auxiliaries_active=auxiliaries_active and plan.uses_threshold,
            )
            if dev_ds is not None and dev_ds.n and (
                epoch % cfg.evaluation.eval_every == 0 or epoch == cfg.optim.epochs
            ):
                epoch_record.dev = _dev_metrics(
                    evaluate(
                        trained, dev_ds, cfg.evaluation.m_bins, parallel=cfg.evaluation.parallel
                    )
                )
            epoch_record.elapsed = time.time() - epoch_start
            record.epochs.append(epoch_record)

            self._logger.info(
                'Epoch finished',
                epoch=epoch,
                train_loss=epoch_record.train_loss,
                u_theta=epoch_record.u_theta,
                dev=epoch_record.dev,
                elapsed=humanfriendly.format_timespan(epoch_record.elapsed),
            )

        record.u_theta = update_u_theta(
            history, cfg.optim.u_theta_warm_epochs, cfg.optim.u_theta_continuous
        )

        if cfg.evaluation.fit_temperature:
            record.temperature = self._fit_temperature(trained, dev_ds)

        if test_ds is not None and test_ds.n:
            record.test = evaluate(
                trained,
                test_ds,
                cfg.evaluation.m_bins,
                temperature=record.temperature,
                u_theta=record.u_theta,
                group_by=cfg.evaluation.group_by,
                parallel=cfg.evaluation.parallel,
            )
            if cfg.evaluation.low_frequency_n:
                record.low_frequency = self._low_frequency(trained, train_ds, test_ds, record)

        record.wall_clock = time.time() - start_time
        self._write_outputs(trained, record)

        self._logger.info(
            'Training finished',
            test=record.test.format_percent() if record.test else None,
            elapsed=humanfriendly.format_timespan(record.wall_clock),
        )
        return trained, record

    def _run_epoch(self, trained, features, labels, order, plan, u_theta, epoch, record):
        cfg = self._cfg
        batch_size = cfg.optim.batch_size
        num_steps = -(-len(order) // batch_size)

        # evenly spaced steps at which the empirical table is rebuilt
        refresh_steps = set()
        if plan.kl_weight > 0:
            refresh_steps = {
                (index * num_steps) // plan.poscal_updates_per_epoch
                for index in range(plan.poscal_updates_per_epoch)
            }

        uncertainties = np.zeros(len(order))
        totals = {'loss': 0.0}
        table = None
        for step in range(num_steps):
            if step in refresh_steps:
                table = losses.EmpiricalTable.build(
                    numerics.softmax_rows(trained.logits(features)),
                    labels,
                    cfg.evaluation.m_bins,
                )

            indices = order[step * batch_size : (step + 1) * batch_size]
            logits, cache = trained.forward(features[indices])
            probs = numerics.softmax_rows(logits)
            uncertainties[indices] = losses.uncertainties(probs)

            loss = losses.total_loss(
                logits,
                labels[indices],
                plan,
                u_theta=u_theta,
                empirical=table.empirical_for(probs) if table is not None else None,
            )
            if not np.isfinite(loss.value):
                self._logger.log_and_raise(
                    'error', 'Loss diverged', epoch=epoch, step=step, exc_type=errors.NumericError
                )

            self._apply_gradients(trained, trained.backward(loss.grad_logits, cache))

            totals['loss'] += loss.value * len(indices)
            for name, value in loss.components.items():
                totals[name] = totals.get(name, 0.0) + value * len(indices)

            if cfg.output.log_steps:
                record.steps.append(
                    StepRecord(
                        epoch=epoch,
                        step=step,
                        indices=tuple(int(index) for index in indices),
                        u_theta=u_theta,
                        loss=loss.value,
                        components=dict(loss.components),
                    )
                )
            self._logger.verbose('Step', epoch=epoch, step=step, loss=loss.value)

        return uncertainties, totals

    def _apply_gradients(self, trained, grads):
        learning_rate = self._cfg.optim.learning_rate
        weight_decay = self._cfg.optim.weight_decay
        for name, param in trained.parameters().items():
            # decoupled weight decay, applied to the parameter rather than to the gradient
            if weight_decay > 0:
                param -= learning_rate * weight_decay * param
            param -= learning_rate * grads[name]

    def _fit_temperature(self, trained, dev_ds):
        if dev_ds is None or dev_ds.n == 0:
            self._logger.log_and_raise(
                'error',
                'Temperature fitting needs a non-empty dev split',
                exc_type=errors.ConfigError,
            )

        dev_ds = dev_ds.remap(trained.vocab)
        fit = evaluation.fit_temperature(
            trained.predict_logits(dev_ds.texts, parallel=self._cfg.evaluation.parallel),
            dev_ds.labels,
        )
        self._logger.info('Fitted temperature', **fit.to_dict())
        return fit

    def _low_frequency(self, trained, train_ds, test_ds, record):
        test_ds = test_ds.remap(trained.vocab)
        logits = trained.predict_logits(test_ds.texts, parallel=self._cfg.evaluation.parallel)
        if record.temperature is not None:
            logits = evaluation.apply_temperature(logits, record.temperature.t)

        return evaluation.low_frequency_report(
            losses.ProbBatch.from_logits(logits, test_ds.labels),
            train_ds.label_counts(),
            min(self._cfg.evaluation.low_frequency_n, trained.k),
            m=self._cfg.evaluation.m_bins,
        )

    def _load_or_optimize_frame(self, k, h):
        frame_path = self._cfg.frame.path
        if frame_path is None:
            return self._frame_optimizer.optimize(k, h)

        frame = sphere.read_frame_csv(frame_path)
        if (frame.k, frame.h) != (k, h):
            self._logger.log_and_raise(
                'error',
                'Frame shape does not match labels and model.h',
                frame_path=frame_path,
                frame_shape=(frame.k, frame.h),
                expected=(k, h),
                exc_type=errors.ConfigError,
            )
        self._logger.debug('Loaded frame', frame_path=frame_path, k=k, h=h)
        return frame

    def _write_outputs(self, trained, record):
        output = self._cfg.output
        if output.frame_path and trained.head_type == 'hyperspherical':
            sphere.write_frame_csv(trained.head.frame, output.frame_path)

        if output.checkpoint_path:
            model.save_checkpoint(
                trained,
                output.checkpoint_path,
                temperature=record.temperature.to_dict() if record.temperature else None,
                frame_path=output.frame_path,
            )
            self._logger.info('Wrote checkpoint', path=output.checkpoint_path)

        if output.run_record_path:
            write_run_record(record, output.run_record_path)
            self._logger.info('Wrote run record', path=output.run_record_path)


def write_run_record(record, path):
    try:
        with open(path, 'w') as fh:
            simplejson.dump(record.to_dict(), fh, indent=2, ignore_nan=True)
    except OSError as exc:
        raise errors.StorageError('Failed to write run record {0}: {1}'.format(path, exc))


def train(cfg, logger=None):
    """
    Loads the configured data and trains, returning (model, RunRecord)
    """
    logger = logger or clients.logging.get_logger()
    if not isinstance(cfg, config.TrainConfig):
        raise errors.ConfigError('train expects a TrainConfig')

    train_ds, dev_ds, test_ds = load_datasets(cfg)
    return Trainer(logger, cfg).fit(train_ds, dev_ds, test_ds)
