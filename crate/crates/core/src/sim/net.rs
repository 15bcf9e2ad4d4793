//! In-process network with per-link fault controls and full traffic capture.
//! Requests still go through the text codec, exactly as over TCP.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::transport::{LineService, Transport, TransportError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetControl {
    pub drop_all: bool,
    /// Let this many requests through, then drop everything.
    pub drop_after_n_messages: Option<u64>,
    /// Deliver to another endpoint instead.
    pub redirect_to: Option<String>,
    /// Upper bound of the simulated one-way delay per request.
    pub latency_ms: u64,
}

impl NetControl {
    pub fn up() -> Self {
        NetControl::default()
    }

    pub fn down() -> Self {
        NetControl { drop_all: true, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub at_ms: u64,
    pub client: String,
    pub endpoint: String,
    pub request: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub delivered: u64,
    pub dropped: u64,
}

type Endpoint = Arc<Mutex<dyn LineService>>;

struct Link {
    control: NetControl,
    since_change: u64,
    stats: LinkStats,
}

struct Inner {
    endpoints: BTreeMap<String, Endpoint>,
    links: BTreeMap<String, Link>,
    capture: Vec<Exchange>,
    rng: ChaCha8Rng,
    clock: Clock,
}

/// Shared handle to the simulated network.
#[derive(Clone)]
pub struct SimNet {
    inner: Arc<Mutex<Inner>>,
}

impl SimNet {
    pub fn new(seed: u64, clock: Clock) -> Self {
        SimNet {
            inner: Arc::new(Mutex::new(Inner {
                endpoints: BTreeMap::new(),
                links: BTreeMap::new(),
                capture: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                clock,
            })),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn clock(&self) -> Clock {
        self.lock().clock.clone()
    }

    pub fn add_endpoint<S: LineService + 'static>(&self, name: &str, service: Arc<Mutex<S>>) {
        self.lock().endpoints.insert(name.to_string(), service);
    }

    /// A transport for `client` that targets `endpoint`.
    pub fn link(&self, client: &str, endpoint: &str) -> SimLink {
        self.lock().links.entry(client.to_string()).or_insert_with(|| Link {
            control: NetControl::up(),
            since_change: 0,
            stats: LinkStats::default(),
        });
        SimLink { net: self.clone(), client: client.to_string(), endpoint: endpoint.to_string() }
    }

    pub fn set_control(&self, client: &str, control: NetControl) {
        let mut inner = self.lock();
        let link = inner.links.entry(client.to_string()).or_insert_with(|| Link {
            control: NetControl::up(),
            since_change: 0,
            stats: LinkStats::default(),
        });
        link.control = control;
        link.since_change = 0;
    }

    pub fn control(&self, client: &str) -> NetControl {
        self.lock().links.get(client).map(|l| l.control.clone()).unwrap_or_default()
    }

    pub fn stats(&self, client: &str) -> LinkStats {
        self.lock().links.get(client).map(|l| l.stats).unwrap_or_default()
    }

    /// Every delivered exchange, in order.
    pub fn capture(&self) -> Vec<Exchange> {
        self.lock().capture.clone()
    }

    /// Exchanges delivered to one endpoint.
    pub fn capture_of(&self, endpoint: &str) -> Vec<Exchange> {
        self.lock().capture.iter().filter(|e| e.endpoint == endpoint).cloned().collect()
    }

    fn deliver(&self, client: &str, endpoint: &str, request: &str) -> Result<String, TransportError> {
        let (target, service, at_ms) = {
            let mut inner = self.lock();
            let Inner { links, endpoints, rng, clock, .. } = &mut *inner;
            let link = links.get_mut(client).expect("links are created with the transport");
            let c = &link.control;
            let cut = c.drop_after_n_messages.is_some_and(|n| link.since_change >= n);
            if c.drop_all || cut {
                link.stats.dropped += 1;
                return Err(TransportError::Unreachable(format!("link {client} is down")));
            }
            let target = c.redirect_to.clone().unwrap_or_else(|| endpoint.to_string());
            let Some(service) = endpoints.get(&target).cloned() else {
                link.stats.dropped += 1;
                return Err(TransportError::Unreachable(format!("no endpoint {target}")));
            };
            if c.latency_ms > 0 {
                clock.advance(rng.gen_range(1..=c.latency_ms));
            }
            link.since_change += 1;
            link.stats.delivered += 1;
            (target, service, clock.now_ms())
        };
        let response = service.lock().unwrap_or_else(|p| p.into_inner()).handle_line(request);
        self.lock().capture.push(Exchange {
            at_ms,
            client: client.to_string(),
            endpoint: target,
            request: request.to_string(),
            response: response.clone(),
        });
        Ok(response)
    }
}

pub struct SimLink {
    net: SimNet,
    client: String,
    endpoint: String,
}

impl SimLink {
    pub fn client(&self) -> &str {
        &self.client
    }
}

impl Transport for SimLink {
    fn call(&mut self, request: &str) -> Result<String, TransportError> {
        self.net.deliver(&self.client, &self.endpoint, request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo(&'static str);

    impl LineService for Echo {
        fn handle_line(&mut self, line: &str) -> String {
            format!("{}:{line}", self.0)
        }
    }

    fn net() -> SimNet {
        let net = SimNet::new(1, Clock::manual(0));
        net.add_endpoint("a", Arc::new(Mutex::new(Echo("a"))));
        net.add_endpoint("b", Arc::new(Mutex::new(Echo("b"))));
        net
    }

    #[test]
    fn controls_apply_per_link() {
        let net = net();
        let mut x = net.link("x", "a");
        let mut y = net.link("y", "a");
        assert_eq!(x.call("1").unwrap(), "a:1");
        net.set_control("x", NetControl::down());
        assert!(x.call("2").is_err());
        assert_eq!(y.call("3").unwrap(), "a:3");
        net.set_control("x", NetControl { redirect_to: Some("b".into()), ..Default::default() });
        assert_eq!(x.call("4").unwrap(), "b:4");
        assert_eq!(net.capture_of("b").len(), 1);
        assert_eq!(net.stats("x"), LinkStats { delivered: 2, dropped: 1 });
    }

    #[test]
    fn cut_after_n_counts_from_the_change() {
        let net = net();
        let mut x = net.link("x", "a");
        x.call("0").unwrap();
        net.set_control("x", NetControl { drop_after_n_messages: Some(2), ..Default::default() });
        assert!(x.call("1").is_ok());
        assert!(x.call("2").is_ok());
        assert!(x.call("3").is_err());
    }

    #[test]
    fn latency_is_seeded() {
        let run = |seed| {
            let clock = Clock::manual(0);
            let net = SimNet::new(seed, clock.clone());
            net.add_endpoint("a", Arc::new(Mutex::new(Echo("a"))));
            net.set_control("x", NetControl { latency_ms: 50, ..Default::default() });
            let mut x = net.link("x", "a");
            for i in 0..10 {
                x.call(&i.to_string()).unwrap();
            }
            clock.now_ms()
        };
        assert_eq!(run(7), run(7));
        assert!(run(7) >= 10);
    }
}
