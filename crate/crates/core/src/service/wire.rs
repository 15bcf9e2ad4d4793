//! JSON-lines wire protocol for the synchronizer.
//!
//! Request: `{"op": "<name>", "session": "<token>"|null, "payload": {...}}`
//! Response: `{"ok": true, "payload": ...}` or
//! `{"ok": false, "error": {"code": "...", "detail": ...}}`.
//! Byte strings, keys and signatures travel as uppercase hex.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Synchronizer;
use crate::crypto::{KeyPair, PublicKey};
use crate::protocol::backend::{Backend, SyncResult};
use crate::protocol::records::{
    KeyLink, KeyListing, PendingRow, ResendRequest, RevokeRequest, RowSubmission, SyncError,
    UserEntry, WrappedKeyRecord,
};
use crate::transport::{LineService, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<SyncError>,
}

impl Response {
    pub(crate) fn from_result(r: SyncResult<Value>) -> Response {
        match r {
            Ok(payload) => Response { ok: true, payload, error: None },
            Err(e) => Response { ok: false, payload: Value::Null, error: Some(e) },
        }
    }
}

#[derive(Deserialize)]
struct RegisterArgs {
    user: String,
    public_key: PublicKey,
    password: String,
}

#[derive(Deserialize)]
struct LoginArgs {
    user: String,
    password: String,
}

#[derive(Deserialize)]
struct UserArg {
    user: String,
}

#[derive(Deserialize)]
struct KeyArgs {
    dossier_id: u64,
    key_version: u64,
}

#[derive(Deserialize)]
struct AckArgs {
    #[serde(default)]
    ack: Vec<u64>,
}

#[derive(Deserialize)]
struct DossierArg {
    dossier_id: u64,
}

fn args<T: DeserializeOwned>(payload: Value) -> SyncResult<T> {
    serde_json::from_value(payload).map_err(|e| SyncError::Protocol(e.to_string()))
}

fn to_value<T: Serialize>(v: T) -> SyncResult<Value> {
    serde_json::to_value(v).map_err(|e| SyncError::Internal(e.to_string()))
}

impl Synchronizer {
    fn session_user(&mut self, req: &Request) -> SyncResult<String> {
        match &req.session {
            Some(t) => self.authenticate(t),
            None => Err(SyncError::SessionExpired),
        }
    }

    /// Executes one decoded request.
    pub fn dispatch(&mut self, req: Request) -> SyncResult<Value> {
        match req.op.as_str() {
            "register_user" => {
                let a: RegisterArgs = args(req.payload)?;
                self.register_user(&a.user, a.public_key, &a.password)?;
                Ok(Value::Null)
            }
            "login" => {
                let a: LoginArgs = args(req.payload)?;
                to_value(self.login(&a.user, &a.password)?)
            }
            "select_user" => {
                let a: UserArg = args(req.payload)?;
                to_value(self.select_user(&a.user)?)
            }
            "get_all_users" => to_value(self.all_users()),
            "get_public_key_by_user" => {
                let a: UserArg = args(req.payload)?;
                to_value(self.public_key(&a.user)?)
            }
            "key_chain" => {
                let a: UserArg = args(req.payload)?;
                to_value(self.key_chain(&a.user)?)
            }
            op => {
                let user = self.session_user(&req)?;
                match op {
                    "rotate_public_key" => {
                        let link: KeyLink = args(req.payload)?;
                        self.rotate_public_key(&user, link)?;
                        Ok(Value::Null)
                    }
                    "deposit_key" => {
                        let rec: WrappedKeyRecord = args(req.payload)?;
                        self.deposit_key(&user, rec)?;
                        Ok(Value::Null)
                    }
                    "delete_decrypting_key" => {
                        let r: RevokeRequest = args(req.payload)?;
                        self.delete_decrypting_key(&user, &r)?;
                        Ok(Value::Null)
                    }
                    "get_decrypting_key" => {
                        let a: KeyArgs = args(req.payload)?;
                        to_value(self.get_decrypting_key(&user, a.dossier_id, a.key_version)?)
                    }
                    "list_keys" => to_value(self.list_keys(&user)),
                    "send_row" => {
                        let sub: RowSubmission = args(req.payload)?;
                        to_value(self.send_row(&user, sub)?)
                    }
                    "get_pending_rows" => {
                        let a: AckArgs = args(req.payload)?;
                        to_value(self.get_pending_rows(&user, &a.ack)?)
                    }
                    "resend_row" => {
                        let a: DossierArg = args(req.payload)?;
                        self.resend_row(&user, a.dossier_id)?;
                        Ok(Value::Null)
                    }
                    "resend_requests" => to_value(self.take_resend_requests(&user)?),
                    other => Err(SyncError::Protocol(format!("unknown op {other:?}"))),
                }
            }
        }
    }
}

impl LineService for Synchronizer {
    fn handle_line(&mut self, line: &str) -> String {
        let result = serde_json::from_str::<Request>(line)
            .map_err(|e| SyncError::Protocol(e.to_string()))
            .and_then(|req| self.dispatch(req));
        serde_json::to_string(&Response::from_result(result)).expect("responses serialize")
    }
}

/// Client side of the wire protocol.
pub struct ServiceClient<T> {
    transport: T,
    session: Option<String>,
    credentials: Option<(String, String)>,
}

impl<T: Transport> ServiceClient<T> {
    pub fn new(transport: T) -> Self {
        ServiceClient { transport, session: None, credentials: None }
    }

    /// Same account and session over another transport.
    pub fn rebind<U: Transport>(&self, transport: U) -> ServiceClient<U> {
        ServiceClient { transport, session: self.session.clone(), credentials: self.credentials.clone() }
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    fn raw_call(&mut self, op: &str, payload: Value) -> SyncResult<Value> {
        let req = Request { op: op.to_string(), session: self.session.clone(), payload };
        let line = serde_json::to_string(&req).expect("requests serialize");
        let reply = self.transport.call(&line).map_err(|e| match e {
            TransportError::Unreachable(m) | TransportError::Lost(m) => SyncError::Unreachable(m),
        })?;
        let resp: Response = serde_json::from_str(&reply).map_err(|e| SyncError::Protocol(e.to_string()))?;
        if resp.ok {
            Ok(resp.payload)
        } else {
            Err(resp.error.unwrap_or_else(|| SyncError::Protocol("error without detail".into())))
        }
    }

    /// Calls an op, logging in again once if the session has expired.
    fn call<R: DeserializeOwned>(&mut self, op: &str, payload: Value) -> SyncResult<R> {
        let v = match self.raw_call(op, payload.clone()) {
            Err(SyncError::SessionExpired) if self.credentials.is_some() => {
                self.relogin()?;
                self.raw_call(op, payload)?
            }
            other => other?,
        };
        serde_json::from_value(v).map_err(|e| SyncError::Protocol(e.to_string()))
    }

    fn relogin(&mut self) -> SyncResult<()> {
        let (user, password) = self.credentials.clone().ok_or(SyncError::SessionExpired)?;
        let token: String = {
            let v = self.raw_call("login", json!({"user": user, "password": password}))?;
            serde_json::from_value(v).map_err(|e| SyncError::Protocol(e.to_string()))?
        };
        self.session = Some(token);
        Ok(())
    }

    pub fn all_users(&mut self) -> SyncResult<Vec<UserEntry>> {
        self.call("get_all_users", Value::Null)
    }

    pub fn select_user(&mut self, user: &str) -> SyncResult<UserEntry> {
        self.call("select_user", json!({ "user": user }))
    }

    pub fn public_key(&mut self, user: &str) -> SyncResult<PublicKey> {
        self.call("get_public_key_by_user", json!({ "user": user }))
    }
}

impl<T: Transport> Backend for ServiceClient<T> {
    fn register(&mut self, user: &str, keys: &KeyPair, password: &str) -> SyncResult<()> {
        self.call::<Value>(
            "register_user",
            json!({"user": user, "public_key": keys.public(), "password": password}),
        )?;
        self.login(user, keys, password)
    }

    fn login(&mut self, user: &str, _keys: &KeyPair, password: &str) -> SyncResult<()> {
        self.credentials = Some((user.to_string(), password.to_string()));
        self.relogin()
    }

    fn key_chain(&mut self, user: &str) -> SyncResult<Vec<KeyLink>> {
        self.call("key_chain", json!({ "user": user }))
    }

    fn rotate_key(&mut self, link: KeyLink, _new_keys: &KeyPair) -> SyncResult<()> {
        self.call::<Value>("rotate_public_key", to_value(link)?).map(drop)
    }

    fn deposit_key(&mut self, rec: &WrappedKeyRecord) -> SyncResult<()> {
        self.call::<Value>("deposit_key", to_value(rec)?).map(drop)
    }

    fn send_row(&mut self, sub: &RowSubmission) -> SyncResult<u64> {
        self.call("send_row", to_value(sub)?)
    }

    fn fetch_pending(&mut self, ack: &[u64]) -> SyncResult<Vec<PendingRow>> {
        self.call("get_pending_rows", json!({ "ack": ack }))
    }

    fn fetch_key(&mut self, _owner: &str, dossier_id: u64, key_version: u64) -> SyncResult<WrappedKeyRecord> {
        self.call("get_decrypting_key", json!({"dossier_id": dossier_id, "key_version": key_version}))
    }

    fn revoke(&mut self, req: &RevokeRequest) -> SyncResult<()> {
        self.call::<Value>("delete_decrypting_key", to_value(req)?).map(drop)
    }

    fn request_resend(&mut self, _owner: &str, dossier_id: u64) -> SyncResult<()> {
        self.call::<Value>("resend_row", json!({ "dossier_id": dossier_id })).map(drop)
    }

    fn resend_requests(&mut self) -> SyncResult<Vec<ResendRequest>> {
        self.call("resend_requests", Value::Null)
    }

    fn list_keys(&mut self) -> SyncResult<Vec<KeyListing>> {
        self.call("list_keys", Value::Null)
    }
}
