//! Beam-training time of each search strategy and the resulting effective
//! rate across coherence times, for a link at a fixed spectral efficiency.

use radarlink::beam::{effective_rate, noise_power_dbm, symbol_duration, training_time, ProtocolConfig, ProtocolVariant};

fn main() {
    let proto = ProtocolConfig::default();
    let spacing = 240e3;
    let t_sym = symbol_duration(2048, spacing, 511);
    println!("symbol {:.4} us, noise per subcarrier {:.2} dBm", t_sym * 1e6, noise_power_dbm(-174.0, 10.0, spacing));

    let variants = [ProtocolVariant::Exhaustive, ProtocolVariant::Wide, ProtocolVariant::Narrow];
    for v in variants {
        println!(
            "{:>10}: {:2} RSU beams, {:3} SS blocks, T_train {:.3} ms",
            v.name(),
            proto.search_size(v),
            proto.ss_blocks(v),
            training_time(&proto, v, t_sym, 3) * 1e3
        );
    }

    let se = 6.0;
    print!("\n{:>9}", "t_coh ms");
    for v in variants {
        print!("{:>12}", v.name());
    }
    println!("   (Mb/s per subcarrier stream at {se} b/s/Hz)");
    for t_coh in [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1] {
        print!("{:>9.0}", t_coh * 1e3);
        for v in variants {
            let r = effective_rate(se, training_time(&proto, v, t_sym, 3), t_coh, spacing);
            print!("{:>12.3}", r / 1e6);
        }
        println!();
    }
}
