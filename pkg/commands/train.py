"""leakwatch train: calibrate a variant on the training window."""

import logging
from argparse import Namespace

from commands.common import add_override_flags, header, load_config, output_dir, save_fitted
from utils import plots
from utils.artifacts import write_csv
from utils.demand_net import TrainedModel
from utils.evaluation import fit_variant
from utils.pipeline_config import load_scenario_data

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('train', help='fit coefficients (BASE, FK) or train the demand network (PINN)')
    add_override_flags(parser)
    parser.set_defaults(handler=cmd_train)


def cmd_train(args: Namespace) -> int:
    pipeline = load_config(args)
    out = output_dir(args, pipeline)
    data = load_scenario_data(pipeline)
    meta = header(args, pipeline.to_dict(), pipeline.seed)

    fitted = fit_variant(pipeline.variant, data, pipeline.run_settings(), pipeline.seed)
    if not isinstance(fitted, TrainedModel):
        path = save_fitted(fitted, out / 'coefficients.json', pipeline.variant, meta)
        print(f'{pipeline.variant} coefficients written: {path} (residual rms {fitted.residual_rms:.3e})')
        return 0

    path = save_fitted(fitted, out / 'model.json', pipeline.variant, meta)
    rows = [
        [r.fold, epoch, tr, va]
        for r in fitted.fold_reports
        for epoch, (tr, va) in enumerate(zip(r.train_losses, r.validation_losses))
    ]
    write_csv(out / 'fold_losses.csv', ['fold', 'epoch', 'train_loss', 'validation_loss'], rows, meta)
    plots.plot_fold_losses(
        out / 'fold_losses.svg',
        [r.train_losses for r in fitted.fold_reports],
        [r.validation_losses for r in fitted.fold_reports],
        selected=fitted.selected_fold,
    )
    best = fitted.fold_reports[fitted.selected_fold]
    print(f'PINN model written: {path} (fold {fitted.selected_fold}, '
          f'validation loss {best.best_validation_loss:.3e})')
    return 0
