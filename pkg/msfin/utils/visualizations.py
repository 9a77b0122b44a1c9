from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from msfin.models.report import MetricReport


class TrainingVisualizer:
    @staticmethod
    def create_training_curves(log: pd.DataFrame) -> go.Figure:
        """Loss, learning rate and validation PSNR against step"""
        fig = make_subplots(
            rows=3, cols=1,
            shared_xaxes=True,
            subplot_titles=('L1 Loss', 'Learning Rate', 'Validation PSNR (dB)')
        )
        fig.add_trace(go.Scatter(
            x=log['step'],
            y=log['loss'],
            name='Loss',
            line=dict(color='blue')
        ), row=1, col=1)
        fig.add_trace(go.Scatter(
            x=log['step'],
            y=log['lr'],
            name='Learning Rate',
            line=dict(color='rgba(0,128,0,0.7)', dash='dash')
        ), row=2, col=1)

        val = log[['step', 'val_psnr']].replace([np.inf, -np.inf], np.nan).dropna()
        fig.add_trace(go.Scatter(
            x=val['step'],
            y=val['val_psnr'],
            name='Validation PSNR',
            mode='lines+markers',
            line=dict(color='red')
        ), row=3, col=1)
        fig.update_layout(height=900, title_text='Training')
        return fig

    @staticmethod
    def create_metric_bars(report: MetricReport) -> go.Figure:
        """Per-image PSNR and SSIM"""
        df = pd.DataFrame([m.model_dump() for m in report.images], columns=['name', 'psnr', 'ssim'])
        df['psnr'] = df['psnr'].replace([np.inf], np.nan)

        fig = make_subplots(rows=1, cols=2, subplot_titles=('PSNR (dB)', 'SSIM'))
        fig.add_trace(go.Bar(x=df['name'], y=df['psnr'], name='PSNR'), row=1, col=1)
        fig.add_trace(go.Bar(x=df['name'], y=df['ssim'], name='SSIM'), row=1, col=2)
        if np.isfinite(report.mean_psnr):
            fig.add_hline(y=report.mean_psnr, line=dict(color='red', dash='dash'), row=1, col=1)
        fig.add_hline(y=report.mean_ssim, line=dict(color='red', dash='dash'), row=1, col=2)
        fig.update_layout(
            title_text=f"x{report.scale} shave={report.shave} ensemble={'on' if report.ensemble else 'off'}"
        )
        return fig

    @staticmethod
    def write_html(fig: go.Figure, path: Union[str, Path]) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fig.write_html(str(path), include_plotlyjs='cdn')
