//! Process accounting helpers (Linux procfs).

use std::fs;
use std::io;

/// Cumulative CPU time (user + system) of `pid` in milliseconds, read
/// from `/proc/<pid>/stat`.
pub fn cpu_time_ms(pid: u32) -> io::Result<u64> {
    let stat = fs::read_to_string(format!("/proc/{pid}/stat"))?;
    parse_stat_cpu_ms(&stat).ok_or_else(|| {
        io::Error::new(io::ErrorKind::InvalidData, "unparseable /proc stat line")
    })
}

/// CPU time of the current process.
pub fn self_cpu_ms() -> io::Result<u64> {
    cpu_time_ms(std::process::id())
}

fn clock_ticks_per_sec() -> u64 {
    let ticks = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if ticks > 0 {
        ticks as u64
    } else {
        100
    }
}

fn parse_stat_cpu_ms(stat: &str) -> Option<u64> {
    // comm can contain spaces; fields resume after the closing paren
    let after_comm = &stat[stat.rfind(')')? + 2..];
    let mut fields = after_comm.split_whitespace();
    // after comm: state(3) ... utime is field 14, stime 15 (1-indexed)
    let utime: u64 = fields.nth(11)?.parse().ok()?;
    let stime: u64 = fields.next()?.parse().ok()?;
    Some((utime + stime) * 1000 / clock_ticks_per_sec())
}

static TERM_FLAG: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

extern "C" fn on_term_signal(_sig: libc::c_int) {
    TERM_FLAG.store(true, std::sync::atomic::Ordering::SeqCst);
}

/// Install SIGTERM/SIGINT handlers and return the flag they set. Safe to
/// call more than once.
pub fn term_flag() -> &'static std::sync::atomic::AtomicBool {
    unsafe {
        libc::signal(
            libc::SIGTERM,
            on_term_signal as *const () as libc::sighandler_t,
        );
        libc::signal(
            libc::SIGINT,
            on_term_signal as *const () as libc::sighandler_t,
        );
    }
    &TERM_FLAG
}

/// Default data-plane socket buffer size. Bounded buffers keep
/// back-pressure visible instead of hiding megabytes in autotuned TCP
/// windows; they must be set before connect/listen or the negotiated
/// window misbehaves.
pub const DATA_SOCKET_BUF: usize = 1 << 17;

fn resolve(addr: &str) -> io::Result<std::net::SocketAddr> {
    use std::net::ToSocketAddrs;
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "address resolves to nothing"))
}

/// Connect with kernel buffers capped at `buf` bytes per direction.
pub fn bounded_connect(addr: &str, buf: usize) -> io::Result<std::net::TcpStream> {
    use socket2::{Domain, Socket, Type};
    let addr = resolve(addr)?;
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, None)?;
    socket.set_recv_buffer_size(buf)?;
    socket.set_send_buffer_size(buf)?;
    socket.connect(&addr.into())?;
    let stream: std::net::TcpStream = socket.into();
    stream.set_nodelay(true)?;
    Ok(stream)
}

/// Listener whose accepted connections inherit capped kernel buffers.
pub fn bounded_listener(addr: &str, buf: usize) -> io::Result<std::net::TcpListener> {
    use socket2::{Domain, Socket, Type};
    let addr = resolve(addr)?;
    let socket = Socket::new(Domain::for_address(addr), Type::STREAM, None)?;
    socket.set_recv_buffer_size(buf)?;
    socket.set_send_buffer_size(buf)?;
    socket.set_reuse_address(true)?;
    socket.bind(&addr.into())?;
    socket.listen(1024)?;
    Ok(socket.into())
}

/// SHA-256 of the running executable, the process's code identity.
pub fn self_code_identity() -> io::Result<crate::crypto::CodeIdentity> {
    let bytes = fs::read("/proc/self/exe")?;
    Ok(crate::crypto::code_hash(&bytes))
}

/// Microseconds since the Unix epoch.
pub fn unix_micros() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("system clock before epoch")
        .as_micros() as u64
}

/// Milliseconds since the Unix epoch.
pub fn unix_millis() -> u64 {
    unix_micros() / 1000
}
