"""
Paired-seed comparison of calibration methods on one dataset. Each preset rewrites the
head and loss sections of a base TrainConfig; every method sees the same seeds, hence
the same splits, noise and initial encoder.
"""
import dataclasses
import time

import humanfriendly
import numpy as np

from . import errors
from . import losses
from . import trainer

REPORTED_METRICS = ('ece_standard', 'ece_classwise', 'f1', 'accuracy', 'precision', 'recall')

RAU_WEIGHT = 3.0
AVUC_WEIGHT = 3.0
KL_WEIGHT = 1.0
LS_EPS = 0.1

# name -> (head, loss plan fields, fit temperature, accepts --with-kl)
PRESETS = {
    'ce': ('linear', {}, False, False),
    'ts': ('linear', {}, True, False),
    'ls': ('linear', {'base': 'ls', 'ls_eps': LS_EPS}, False, False),
    'poscal': ('linear', {'kl_weight': KL_WEIGHT}, False, True),
    'avuc': ('linear', {'avuc_weight': AVUC_WEIGHT}, False, True),
    'hs-rau': ('hyperspherical', {'rau_weight': RAU_WEIGHT}, False, True),
    'wo-hs': ('linear', {'rau_weight': RAU_WEIGHT}, False, False),
    'wo-rau': ('hyperspherical', {}, False, False),
    'wo-both': ('linear', {}, False, False),
    'rau-to-avuc': ('hyperspherical', {'avuc_weight': AVUC_WEIGHT}, False, False),
}

DEFAULT_METHODS = ('ce', 'hs-rau')


def preset_config(base_cfg, method, seed, train_noise=None, with_kl=False):
    try:
        head, loss_fields, fit_temperature, accepts_kl = PRESETS[method]
    except KeyError:
        raise errors.ConfigError(
            'Unknown method {0}, known methods: {1}'.format(method, ', '.join(sorted(PRESETS)))
        )

    loss_fields = dict(loss_fields)
    if with_kl and accepts_kl:
        loss_fields['kl_weight'] = KL_WEIGHT

    plan = dataclasses.replace(
        losses.LossPlan(poscal_updates_per_epoch=base_cfg.loss.poscal_updates_per_epoch),
        **loss_fields
    )
    data_cfg = base_cfg.data
    if train_noise is not None:
        data_cfg = dataclasses.replace(data_cfg, train_noise=train_noise)

    # per-method outputs would overwrite each other
    return dataclasses.replace(
        base_cfg,
        seed=seed,
        data=data_cfg,
        model=dataclasses.replace(base_cfg.model, head=head),
        loss=plan,
        evaluation=dataclasses.replace(base_cfg.evaluation, fit_temperature=fit_temperature),
        output=dataclasses.replace(
            base_cfg.output, checkpoint_path=None, run_record_path=None, frame_path=None
        ),
    )


def _summarize(runs):
    summary = {}
    for metric in REPORTED_METRICS:
        values = [run['test'][metric] for run in runs]
        summary[metric] = {'mean': float(np.mean(values)), 'per_seed': values}

    low_frequency = [run['low_frequency'] for run in runs if run['low_frequency']]
    if low_frequency:
        summary['low_frequency'] = {
            'average_f1': float(np.mean([entry['average_f1'] for entry in low_frequency])),
            'average_ece': float(np.mean([entry['average_ece'] for entry in low_frequency])),
        }
    return summary


class Comparison(object):
    def __init__(self, logger, base_cfg, methods=DEFAULT_METHODS, num_seeds=5,
                 noise_levels=(None,), with_kl=False):
        self._logger = logger.get_child('compare')
        self._base_cfg = base_cfg
        self._methods = list(methods)
        self._seeds = [base_cfg.seed + index for index in range(num_seeds)]
        self._noise_levels = list(noise_levels)
        self._with_kl = with_kl

        if num_seeds < 1:
            self._logger.log_and_raise(
                'error', 'Need at least one seed', num_seeds=num_seeds, exc_type=errors.ConfigError
            )
        for method in self._methods:
            preset_config(base_cfg, method, base_cfg.seed)

        self._logger.debug(
            'Initialized',
            methods=self._methods,
            seeds=self._seeds,
            noise_levels=self._noise_levels,
            with_kl=with_kl,
        )

    def run(self):
        """
        Trains every method on every seed and noise level. Returns one table per noise
        level with per-method means, per-seed values and the low-frequency summary.
        """
        start_time = time.time()
        tables = []
        for noise in self._noise_levels:
            methods = {}
            for method in self._methods:
                runs = []
                for seed in self._seeds:
                    cfg = preset_config(self._base_cfg, method, seed, noise, self._with_kl)
                    _, record = trainer.train(cfg, logger=self._logger)
                    if record.test is None:
                        self._logger.log_and_raise(
                            'error',
                            'Comparison needs a non-empty test split',
                            method=method,
                            exc_type=errors.ConfigError,
                        )
                    runs.append(
                        {
                            'seed': seed,
                            'test': record.test.to_dict(),
                            'low_frequency': record.low_frequency,
                        }
                    )
                    self._logger.info(
                        'Run finished',
                        method=method,
                        seed=seed,
                        noise=noise,
                        **record.test.format_percent()
                    )
                methods[method] = _summarize(runs)

            tables.append(
                {
                    'train_noise': self._base_cfg.data.train_noise if noise is None else noise,
                    'methods': methods,
                }
            )

        self._logger.info(
            'Comparison finished',
            runs=len(self._noise_levels) * len(self._methods) * len(self._seeds),
            elapsed=humanfriendly.format_timespan(time.time() - start_time),
        )
        return {'seeds': self._seeds, 'tables': tables}
