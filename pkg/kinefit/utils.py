import logging
import os


def init_logger(log_dir=None, verbose=False):
    """Configure the `kinefit` logger hierarchy

    Library modules only create module-level loggers, this is the single place where handlers are installed.
    """
    logger = logging.getLogger("kinefit")
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter("%(asctime)s - %(message)s")
    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
        handler = logging.FileHandler(os.path.join(log_dir, "kinefit.log"))
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    return logger


def summary_writer(log_dir):
    """Create a tensorboardX writer, or `None` if no log directory was requested"""
    if log_dir is None:
        return None
    from tensorboardX import SummaryWriter
    return SummaryWriter(log_dir)


class AverageMeter(object):
    """Computes and stores the average and current value"""

    def __init__(self):
        self.reset()

    def reset(self):
        self.val = 0
        self.avg = 0
        self.sum = 0
        self.count = 0
        self.max = float("-inf")

    def update(self, val, n=1):
        self.val = val
        self.sum += val * n
        self.count += n
        self.avg = self.sum / self.count
        self.max = max(self.max, val)
