//! Wire protocol: bit-exact message encoding, token lifecycle, the
//! server-side session gate, and the weight-file encryption seam.

pub mod cipher;
pub mod message;
pub mod session;
pub mod token;

pub use cipher::{Cipher, IdentityCipher, XorShaStreamCipher};
pub use message::{
    decode_frame, decode_json, extract_tensor, read_frame, tensor_message, LabelPolicy, Message,
    ProtocolError, TensorMode, MAX_FRAME_LEN,
};
pub use session::{ClientRegistry, RevokedSession, SessionState, StoreMode, IDLE_TIMEOUT};
pub use token::{TokenState, TOKEN_TTL};
