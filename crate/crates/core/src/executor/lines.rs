use tokio::io::{AsyncBufRead, AsyncBufReadExt};

/// Longest line kept verbatim; longer lines are cut and suffixed with [`TRUNCATION_MARKER`].
pub const MAX_LINE_BYTES: usize = 1 << 20;
pub(crate) const TRUNCATION_MARKER: &str = " [truncated]";

/// Reads the next line without its terminator, holding at most `limit` bytes of it.
/// Returns `None` at end of input.
pub(crate) async fn next_line<R: AsyncBufRead + Unpin>(
    reader: &mut R,
    limit: usize,
) -> std::io::Result<Option<String>> {
    let mut buf = Vec::new();
    let mut truncated = false;
    let mut saw_any = false;
    loop {
        let chunk = reader.fill_buf().await?;
        if chunk.is_empty() {
            break;
        }
        saw_any = true;
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i, true),
            None => (chunk.len(), false),
        };
        let room = limit.saturating_sub(buf.len());
        if take > room {
            truncated = true;
        }
        buf.extend_from_slice(&chunk[..take.min(room)]);
        reader.consume(if done { take + 1 } else { take });
        if done {
            break;
        }
    }
    if !saw_any {
        return Ok(None);
    }
    if buf.last() == Some(&b'\r') {
        buf.pop();
    }
    let mut line = String::from_utf8_lossy(&buf).into_owned();
    if truncated {
        line.push_str(TRUNCATION_MARKER);
    }
    Ok(Some(line))
}
