import dataclasses
import time

import humanfriendly

from . import data
from . import errors
from . import evaluation
from . import experiments
from . import losses
from . import model
from . import sphere
from . import trainer


class Processor(object):
    """
    One method per command-line subcommand. Every method returns a json-ready dict.
    """

    def __init__(self, logger, parallel=1):
        self._logger = logger
        self._parallel = parallel

        self._logger.debug('Initialized', parallel=self._parallel)

    def sphere_gen(self, k, h, out_path, frame_cfg):
        frame = sphere.FrameOptimizer(self._logger, frame_cfg).optimize(k, h)
        sphere.write_frame_csv(frame, out_path)

        return {
            'path': out_path,
            'k': frame.k,
            'h': frame.h,
            'gram_penalty': sphere.gram_penalty(frame),
            'max_pairwise_cosine': sphere.max_pairwise_cosine(frame),
        }

    def train(self, cfg):
        _, record = trainer.train(cfg, logger=self._logger)
        return record.to_dict()

    def evaluate(self, checkpoint_path, data_path, m_bins, use_temperature=True, group_by='pred'):
        """
        Evaluates a checkpoint on a jsonl dataset, applying the stored temperature
        unless told otherwise
        """
        trained, temperature = model.load_checkpoint(checkpoint_path)
        dataset = data.load_jsonl(data_path)

        fit = None
        if use_temperature and temperature is not None:
            fit = evaluation.TemperatureFit(**temperature)

        report = trainer.evaluate(
            trained,
            dataset,
            m_bins,
            temperature=fit,
            group_by=group_by,
            parallel=self._parallel,
        )
        self._logger.info('Evaluated', data_path=data_path, **report.format_percent())
        return report.to_dict()

    def calibrate(self, checkpoint_path, dev_path, out_path=None):
        """
        Fits a temperature on dev data and stores it in the checkpoint (or a copy at out_path)
        """
        document = model.read_checkpoint_document(checkpoint_path)
        trained = model.model_from_document(document)
        dev_ds = data.load_jsonl(dev_path).remap(trained.vocab)
        if dev_ds.n == 0:
            self._logger.log_and_raise(
                'error', 'Dev set is empty', dev_path=dev_path, exc_type=errors.DataError
            )

        fit = evaluation.fit_temperature(
            trained.predict_logits(dev_ds.texts, parallel=self._parallel), dev_ds.labels
        )
        out_path = out_path or checkpoint_path
        model.save_checkpoint(
            trained,
            out_path,
            temperature=fit.to_dict(),
            frame_path=document['head'].get('frame_path'),
        )

        self._logger.info('Calibrated', out_path=out_path, **fit.to_dict())
        return dict(fit.to_dict(), path=out_path)

    def noise(self, in_path, out_path, fraction, seed):
        dataset = data.load_jsonl(in_path)
        noisy = data.inject_noise(dataset, fraction, seed)
        data.write_jsonl(noisy, out_path)

        changed = int((dataset.labels != noisy.labels).sum())
        self._logger.info('Injected label noise', changed=changed, samples=dataset.n)
        return {'path': out_path, 'samples': dataset.n, 'changed': changed}

    def report(self, checkpoint_path, data_path, out_path, m_bins, group_by='pred',
               use_temperature=True):
        """
        Writes the reliability csv of a checkpoint on a dataset
        """
        trained, temperature = model.load_checkpoint(checkpoint_path)
        dataset = data.load_jsonl(data_path).remap(trained.vocab)
        if dataset.n == 0:
            self._logger.log_and_raise(
                'error', 'Dataset is empty', data_path=data_path, exc_type=errors.DataError
            )

        logits = trained.predict_logits(dataset.texts, parallel=self._parallel)
        if use_temperature and temperature is not None:
            logits = evaluation.apply_temperature(logits, temperature['t'])

        batch = losses.ProbBatch.from_logits(logits, dataset.labels)
        bins = evaluation.bin_predictions(batch, m_bins, group_by=group_by)
        evaluation.emit_reliability_csv(bins, out_path)

        self._logger.info(
            'Wrote reliability csv', path=out_path, cells=int((bins.counts > 0).sum())
        )
        return {
            'path': out_path,
            'ece_classwise': evaluation.ece_classwise(bins, batch.n, batch.k),
            'ece_standard': evaluation.ece_standard(batch, m_bins),
            'histogram': evaluation.confidence_histogram(batch, m_bins),
        }

    def synth(self, out_path, k, n, noise, seed, decay=None, pool_size=20):
        dataset = data.synth_gaussian_text(k, n, noise, seed, decay=decay, pool_size=pool_size)
        data.write_jsonl(dataset, out_path)

        self._logger.info('Wrote synthetic dataset', path=out_path, samples=n, labels=k)
        return {
            'path': out_path,
            'samples': dataset.n,
            'label_counts': dict(zip(dataset.vocab, dataset.label_counts().tolist())),
        }

    def compare(self, cfg, methods, num_seeds, noise_levels, with_kl=False, worst_n=3):
        start_time = time.time()
        if cfg.evaluation.low_frequency_n == 0 and worst_n:
            cfg = dataclasses.replace(
                cfg, evaluation=dataclasses.replace(cfg.evaluation, low_frequency_n=worst_n)
            )

        result = experiments.Comparison(
            self._logger,
            cfg,
            methods=methods,
            num_seeds=num_seeds,
            noise_levels=noise_levels,
            with_kl=with_kl,
        ).run()

        self._logger.debug(
            'Compare command finished',
            elapsed=humanfriendly.format_timespan(time.time() - start_time),
        )
        return result
