from os import makedirs, path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_angle_traces"]

# Fixed element ids and no timestamp, so identical traces give identical files
plt.rcParams["svg.hashsalt"] = "kinefit"
_METADATA = {"Date": None}


def plot_angle_traces(traces, out_dir, clip):
    """Write one SVG per coordinate comparing predicted and ground truth angles

    Parameters
    ----------
    traces : pandas.DataFrame
        Output of `metrics.angle_traces`.
    out_dir : str
        Output directory, created if missing.
    clip : str
        Clip name, used as file prefix and title.

    Returns
    -------
    files : list of str
        Paths of the written figures.
    """
    makedirs(out_dir, exist_ok=True)
    files = []
    for column in traces.columns:
        if not column.endswith("_pred"):
            continue
        name = column[:-len("_pred")]
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(traces["time"], traces[name + "_truth"], color="black", linewidth=1., label="ground truth")
        ax.plot(traces["time"], traces[column], color="tab:red", linewidth=1., linestyle="--", label="predicted")
        ax.set_xlabel("time [s]")
        ax.set_ylabel("{} [deg]".format(name))
        ax.set_title(clip)
        ax.legend(loc="upper right", fontsize="small")
        fig.tight_layout()

        file_name = path.join(out_dir, "{}_{}.svg".format(clip, name))
        fig.savefig(file_name, format="svg", metadata=_METADATA)
        plt.close(fig)
        files.append(file_name)
    return files
