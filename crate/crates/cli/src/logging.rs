use std::io::Write;

/// `level=... target=... msg="..."` lines on standard error.
pub fn init(filter: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} target={} msg={:?}",
                record.level().as_str().to_lowercase(),
                record.target(),
                record.args().to_string()
            )
        })
        .try_init();
}
