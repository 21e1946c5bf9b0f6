//! Blocking client for the server's client protocol.

use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use bytes::Bytes;
use logstore_core::Lsn;

use crate::protocol::{read_response, write_message, ClientRequest, ClientResponse, ProtocolError};

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Client, ProtocolError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => return Client::from_stream(s, timeout),
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "address resolved to nothing"))
            .into())
    }

    fn from_stream(stream: TcpStream, timeout: Duration) -> Result<Client, ProtocolError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Client {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn call(&mut self, req: &ClientRequest) -> Result<ClientResponse, ProtocolError> {
        write_message(&mut self.writer, &req.encode())?;
        read_response(&mut self.reader)
    }

    pub fn get(&mut self, key: impl Into<Bytes>) -> Result<ClientResponse, ProtocolError> {
        self.call(&ClientRequest::Get {
            key: key.into(),
            view: Lsn::NONE,
        })
    }

    pub fn put(&mut self, key: impl Into<Bytes>, value: impl Into<Bytes>) -> Result<ClientResponse, ProtocolError> {
        self.call(&ClientRequest::Put {
            key: key.into(),
            value: value.into(),
        })
    }
}
