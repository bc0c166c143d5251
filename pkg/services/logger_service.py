import os
import logging
import shutil
import time
from logging.handlers import TimedRotatingFileHandler

from modules.tcd_forecast import config as CFG


class LoggerService:
    """
    Central logging for the forecasting toolkit. Two streams:

    1. Stream A (System): {base}/logs/tcd_system.log
       - Parent of every library logger (tcd_system.sampler, tcd_system.trainer, ...).
       - Retention: 30 daily rotations (TimedRotatingFileHandler).

    2. Stream B (Run): {base}/runs/{run_id}/logs/run_flight_recorder.log
       - One file per CLI run: stage transitions, per-epoch losses, report paths.
       - Retention: LOG_RETENTION_DAYS, enforced by cleanup_run_logs on startup.
         Only the logs folder is removed; checkpoints and reports stay.
    """
    SYSTEM_LOGGER = 'tcd_system'
    SYSTEM_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'
    RUN_FORMAT = '%(asctime)s - %(levelname)s - STAGE: %(stage)s - %(message)s'

    def __init__(self, base_data_path=CFG.DATA_DIR, verbose=False, retention_days=CFG.LOG_RETENTION_DAYS):
        self.system_log_dir = os.path.join(base_data_path, 'logs')
        self.run_log_base_dir = os.path.join(base_data_path, 'runs')
        os.makedirs(self.system_log_dir, exist_ok=True)

        self.system_logger = self._setup_system_logger(verbose)
        self.cleanup_run_logs(retention_days=retention_days)

    @property
    def system_log_path(self):
        return os.path.join(self.system_log_dir, f'{self.SYSTEM_LOGGER}.log')

    def _setup_system_logger(self, verbose):
        logger = logging.getLogger(self.SYSTEM_LOGGER)
        logger.setLevel(logging.DEBUG if verbose else logging.INFO)

        for old in list(logger.handlers):
            old.close()
            logger.removeHandler(old)

        handler = TimedRotatingFileHandler(self.system_log_path, when="midnight", interval=1, backupCount=30)
        handler.setFormatter(logging.Formatter(self.SYSTEM_FORMAT))
        logger.addHandler(handler)

        if verbose:
            console = logging.StreamHandler()
            console.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
            logger.addHandler(console)
        return logger

    def run_dir(self, run_id):
        return os.path.join(self.run_log_base_dir, str(run_id))

    def _get_run_logger(self, run_id):
        log_dir = os.path.join(self.run_dir(run_id), 'logs')
        os.makedirs(log_dir, exist_ok=True)

        logger = logging.getLogger(f'tcd_run_{run_id}')
        logger.setLevel(logging.DEBUG)
        logger.propagate = False

        if not logger.handlers:
            handler = logging.FileHandler(os.path.join(log_dir, 'run_flight_recorder.log'), mode='a')
            handler.setFormatter(logging.Formatter(self.RUN_FORMAT))
            logger.addHandler(handler)
        return logger

    def close_run(self, run_id):
        logger = logging.getLogger(f'tcd_run_{run_id}')
        for handler in list(logger.handlers):
            handler.close()
            logger.removeHandler(handler)

    def cleanup_run_logs(self, retention_days=CFG.LOG_RETENTION_DAYS):
        """Deletes run log folders older than the retention window."""
        cutoff = time.time() - retention_days * 86400
        deleted_count = 0

        if not os.path.exists(self.run_log_base_dir):
            return 0

        try:
            for run_id in os.listdir(self.run_log_base_dir):
                log_dir = os.path.join(self.run_log_base_dir, run_id, 'logs')
                if os.path.isdir(log_dir) and os.path.getmtime(log_dir) < cutoff:
                    shutil.rmtree(log_dir)
                    deleted_count += 1

            if deleted_count > 0:
                self.log_system('INFO', f"Startup Cleanup: Removed {deleted_count} expired run log directories "
                                        f"(> {retention_days} days).")
        except OSError as e:
            self.log_system('ERROR', f"Log retention cleanup failed: {e}")
        return deleted_count

    def log_system(self, level, message):
        log_func = getattr(self.system_logger, level.lower(), self.system_logger.info)
        log_func(message)

    def log_run(self, run_id, level, message, stage='SYSTEM'):
        try:
            run_logger = self._get_run_logger(run_id)
            log_func = getattr(run_logger, level.lower(), run_logger.debug)
            log_func(message, extra={'stage': stage})
        except OSError as e:
            self.log_system('ERROR', f"Failed to write run log for {run_id}: {e}")
