//! TCP client for denoisers served over the wire protocol in [`super::wire`].

use std::io::Write;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use super::wire::{encode_request, read_response, RequestHeader, Response};
use super::{DenoisingModel, ModelOutput, Parameterization};
use crate::error::{RemoteError, Result};
use crate::scalar::Scalar;

/// One connection to a remote denoiser. Requests on a handle are serialized;
/// use one handle per worker for concurrent sampling.
pub struct RemoteDenoiser {
    stream: Mutex<Option<TcpStream>>,
    dim: usize,
    param: Parameterization,
}

impl RemoteDenoiser {
    /// Connects and fixes the expected dimension. `param` is the
    /// parameterization asked for in requests; the server may answer in
    /// another one, which is reported on each output.
    pub fn connect<A: ToSocketAddrs>(addr: A, dim: usize, param: Parameterization) -> Result<Self, RemoteError> {
        let addrs: Vec<_> = addr.to_socket_addrs().map_err(RemoteError::Connection)?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, Duration::from_secs(10)) {
                Ok(s) => {
                    s.set_nodelay(true).map_err(RemoteError::Connection)?;
                    return Ok(RemoteDenoiser {
                        stream: Mutex::new(Some(s)),
                        dim,
                        param,
                    });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(RemoteError::Connection(last.unwrap_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotFound, "address resolved to nothing")
        })))
    }

    /// Evaluates a batch of states at a shared time.
    pub fn evaluate_batch<T: Scalar>(
        &self,
        xs: &[Vec<T>],
        t: T,
        cond: Option<u32>,
    ) -> Result<Vec<ModelOutput<T>>, RemoteError> {
        if xs.is_empty() {
            return Err(RemoteError::Protocol("zero-length batch".into()));
        }
        if let Some(bad) = xs.iter().find(|x| x.len() != self.dim) {
            return Err(RemoteError::Dimension {
                expected: self.dim,
                found: bad.len(),
            });
        }
        let header = RequestHeader {
            batch: xs.len() as u32,
            dim: self.dim as u32,
            t: t.to_f64_lossy(),
            param: self.param.wire_name().into(),
            cond: cond.map(i64::from),
        };
        let payload: Vec<f32> = xs.iter().flatten().map(|v| v.to_f64_lossy() as f32).collect();
        let frame = encode_request(&header, &payload);

        let mut guard = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        let stream = guard
            .as_mut()
            .ok_or_else(|| RemoteError::Protocol("connection closed after an earlier protocol failure".into()))?;
        let result = stream
            .write_all(&frame)
            .and_then(|_| stream.flush())
            .map_err(RemoteError::Connection)
            .and_then(|_| read_response(stream));
        let response = match result {
            Ok(r) => r,
            Err(e) => {
                // framing is unknown after a failed read
                *guard = None;
                return Err(e);
            }
        };
        drop(guard);

        match response {
            Response::Error { status, message, .. } => Err(RemoteError::Server { status, message }),
            Response::Ok { header, payload } => {
                let dim = header.dim.unwrap_or(0) as usize;
                if dim != self.dim {
                    return Err(RemoteError::Dimension {
                        expected: self.dim,
                        found: dim,
                    });
                }
                if header.batch != Some(xs.len() as u32) {
                    return Err(RemoteError::Protocol(format!(
                        "asked for {} rows, got {:?}",
                        xs.len(),
                        header.batch
                    )));
                }
                let param = header
                    .param
                    .as_deref()
                    .and_then(Parameterization::from_wire_name)
                    .ok_or_else(|| RemoteError::Protocol(format!("unknown param {:?}", header.param)))?;
                Ok(payload
                    .chunks_exact(self.dim)
                    .map(|row| ModelOutput::new(param, row.iter().map(|&v| T::lit(v as f64)).collect(), t))
                    .collect())
            }
        }
    }
}

impl<T: Scalar> DenoisingModel<T> for RemoteDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[T], t: T, cond: Option<u32>) -> Result<ModelOutput<T>> {
        let mut out = self.evaluate_batch(&[x.to_vec()], t, cond)?;
        Ok(out.pop().expect("batch of one"))
    }
}
