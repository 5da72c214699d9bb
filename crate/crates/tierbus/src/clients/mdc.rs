//! Metering Data Collector: the trusted producer-side component that
//! seals raw readings before they touch the untrusted gateway.

use ed25519_dalek::{Signer, SigningKey};

use crate::crypto::{seal_message, DataKey};
use crate::envelope::{
    EncryptionMode, EnvelopeError, LevelSet, Measurement, PrivacyLevel, Publication, Subscription,
    Topic, TopicFilter, TOPIC_METER,
};

/// Holds the data key and the publisher signing key. Raw measurements go
/// out sealed at High; the collector is also the authority that signs
/// subscription authorizations for its stream.
#[derive(Clone)]
pub struct Mdc {
    publisher_id: u64,
    topic: Topic,
    data_key: DataKey,
    signing_key: SigningKey,
}

impl Mdc {
    pub fn new(publisher_id: u64, data_key: DataKey, signing_key: SigningKey) -> Mdc {
        Mdc {
            publisher_id,
            topic: Topic::new(TOPIC_METER).expect("constant topic fits"),
            data_key,
            signing_key,
        }
    }

    pub fn publisher_id(&self) -> u64 {
        self.publisher_id
    }

    pub fn data_key(&self) -> &DataKey {
        &self.data_key
    }

    pub fn verifying_key(&self) -> ed25519_dalek::VerifyingKey {
        self.signing_key.verifying_key()
    }

    /// Seal one measurement into its publication: payload is the record
    /// serialization under counter mode with the per-message IV derived
    /// from (publisher, epoch, seq); header carries High + CounterMode.
    pub fn process(&self, m: &Measurement) -> Result<Publication, EnvelopeError> {
        let payload = seal_message(&self.data_key, self.publisher_id, m.seq, &m.encode());
        Publication::new(
            self.topic.clone(),
            PrivacyLevel::High,
            EncryptionMode::CounterMode,
            self.publisher_id,
            self.data_key.key_id(),
            payload,
        )
    }

    /// Advance to the next key epoch; the caller re-registers the new key
    /// with the attestor.
    pub fn rotate_key(&mut self) -> &DataKey {
        self.data_key = self.data_key.rotate();
        &self.data_key
    }

    /// Signing closure for the authorization endpoint, so the endpoint
    /// thread never holds the collector itself.
    pub fn subscription_signer(&self) -> super::producer::SubscriptionSigner {
        let key = self.signing_key.clone();
        let publisher_id = self.publisher_id;
        Box::new(move |subscriber_id, filter, levels| {
            let msg = Subscription::signing_bytes(subscriber_id, publisher_id, &filter, levels);
            Subscription {
                subscriber_id,
                publisher_id,
                topic_filter: filter,
                levels,
                authorization: key.sign(&msg).to_bytes(),
            }
        })
    }

    /// Publisher-side authorization: sign a subscription for a vetted
    /// subscriber.
    pub fn authorize_subscription(
        &self,
        subscriber_id: u64,
        topic_filter: TopicFilter,
        levels: LevelSet,
    ) -> Subscription {
        let msg =
            Subscription::signing_bytes(subscriber_id, self.publisher_id, &topic_filter, levels);
        Subscription {
            subscriber_id,
            publisher_id: self.publisher_id,
            topic_filter,
            levels,
            authorization: self.signing_key.sign(&msg).to_bytes(),
        }
    }
}
