//! Greedy control-message routing over the ring, with and without shortcuts.

use mcr::signaling::{greedy_path, RouteView};

fn main() -> anyhow::Result<()> {
    let n = 8;
    let ring = |p| RouteView::ring(p, n);
    for (s, t) in [(0, 5), (1, 6), (3, 4)] {
        println!(
            "ring      {s}->{t}: {:?}",
            greedy_path(s, t, n as u32, ring)?
        );
    }

    // process 0 also holds a direct route to 4
    let with_shortcut = |p| {
        let mut v = RouteView::ring(p, n);
        match p {
            0 => {
                v.neighbors.insert(4);
            }
            4 => {
                v.neighbors.insert(0);
            }
            _ => {}
        }
        v
    };
    println!(
        "shortcut  0->5: {:?}",
        greedy_path(0, 5, n as u32, with_shortcut)?
    );
    Ok(())
}
