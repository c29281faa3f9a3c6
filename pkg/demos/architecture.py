"""Print the reference and desk architectures with their param/MAC totals,
and how the separable blocks compare with dense 3x3 convolutions."""
from quicknet import arch as A


def main():
    ref = A.reference_config()
    g = A.build_quicknet(ref, 0)
    print(A.summarize(g))
    stats = A.param_count(g)
    print("params", stats.params, "->", A.format_megabytes(stats.params))

    dense = A.build_quicknet(A.dense_equivalent(ref), 0)
    sep_macs, dense_macs = A.flop_count(g).macs, A.flop_count(dense).macs
    print(f"MACs/image: separable {sep_macs:,}  dense {dense_macs:,}  ({dense_macs / sep_macs:.2f}x)")
    for c_out in (64, 128, 256):
        print(f"  block ratio at {c_out} output channels: {A.separable_ratio(c_out, 3)}")

    desk = A.build_quicknet(A.desk_config(), 0)
    print(f"\ndesk model: {A.param_count(desk).params:,} params, {A.flop_count(desk).macs:,} MACs/image")


if __name__ == "__main__":
    main()
