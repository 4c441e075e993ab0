use super::{GradSet, ModelConfig, ParamSet};
use crate::cold_start::{id_route, IdRoute};
use crate::error::{input_err, Result};
use crate::linalg::axpy;
use crate::world::TitleSideInfo;

/// One input position: the item evidence it carries (if any), whether that
/// item's collaborative embedding is masked, and its context field values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventToken {
    pub item: Option<u32>,
    pub masked: bool,
    pub context: Vec<u16>,
}

fn check_token(tok: &EventToken, config: &ModelConfig, side: &TitleSideInfo) -> Result<()> {
    if let Some(item) = tok.item {
        if item as usize >= config.vocab || item as usize >= side.len() {
            return input_err(format!("item {item} outside vocabulary of {}", config.vocab));
        }
    }
    if tok.context.len() != config.context_cards.len() {
        return input_err(format!(
            "token has {} context fields, model expects {}",
            tok.context.len(),
            config.context_cards.len()
        ));
    }
    for (j, (&c, &card)) in tok.context.iter().zip(&config.context_cards).enumerate() {
        if c as usize >= card {
            return input_err(format!("context field {j} value {c} exceeds cardinality {card}"));
        }
    }
    Ok(())
}

/// Fuses every event into one `embed_dim` vector: ID-side embedding (ID row
/// or OOV vector) + semantic projection + one embedding per context field.
/// Returns a row-major `tokens.len() × embed_dim` matrix.
pub fn embed_events(
    tokens: &[EventToken],
    params: &ParamSet,
    config: &ModelConfig,
    side: &TitleSideInfo,
) -> Result<Vec<f64>> {
    let e = config.embed_dim;
    let f = side.feature_dim;
    let mut out = vec![0.0; tokens.len() * e];
    for (tok, row) in tokens.iter().zip(out.chunks_mut(e)) {
        check_token(tok, config, side)?;
        if let Some(item) = tok.item {
            match id_route(item, tok.masked, side) {
                IdRoute::Id => axpy(1.0, params.item_id.row(item as usize), row),
                IdRoute::Oov => axpy(1.0, &params.oov.data, row),
            }
            for (p, &x) in side.features_of(item).iter().enumerate() {
                if x != 0.0 {
                    axpy(x, &params.sem_in.data[p * e..(p + 1) * e], row);
                }
            }
            debug_assert_eq!(params.sem_in.shape, vec![f, e]);
        }
        for (table, &c) in params.context.iter().zip(&tok.context) {
            axpy(1.0, table.row(c as usize), row);
        }
    }
    Ok(out)
}

/// Scatters token gradients back into the embedding tables.
pub fn embed_backward(tokens: &[EventToken], d_tokens: &[f64], side: &TitleSideInfo, grads: &mut GradSet) {
    let e = grads.oov.len();
    for (tok, drow) in tokens.iter().zip(d_tokens.chunks(e)) {
        if let Some(item) = tok.item {
            match id_route(item, tok.masked, side) {
                IdRoute::Id => axpy(1.0, drow, grads.item_id.row_mut(item as usize)),
                IdRoute::Oov => axpy(1.0, drow, &mut grads.oov.data),
            }
            for (p, &x) in side.features_of(item).iter().enumerate() {
                if x != 0.0 {
                    axpy(x, drow, &mut grads.sem_in.data[p * e..(p + 1) * e]);
                }
            }
        }
        for (table, &c) in grads.context.iter_mut().zip(&tok.context) {
            axpy(1.0, drow, table.row_mut(c as usize));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Precision;
    use crate::decoder::DecoderMode;

    fn setup() -> (ModelConfig, ParamSet, TitleSideInfo) {
        let config = ModelConfig {
            layers: 1,
            width: 8,
            heads: 2,
            seq_len: 8,
            vocab: 5,
            embed_dim: 8,
            ffn_mult: 2,
            context_cards: vec![3, 2],
            feature_dim: 3,
            z_dim: 4,
            decoder_mode: DecoderMode::Projected,
            precision: Precision::F64,
        };
        let params = ParamSet::init(&config, 4);
        let side = TitleSideInfo {
            feature_dim: 3,
            features: (0..15).map(|i| 0.1 * i as f64).collect(),
            in_vocab: vec![true, true, true, true, false],
        };
        (config, params, side)
    }

    #[test]
    fn zero_features_zero_context_gives_id_row() {
        let (config, mut params, mut side) = setup();
        side.features.iter_mut().for_each(|v| *v = 0.0);
        params.context.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let tok = EventToken { item: Some(2), masked: false, context: vec![1, 1] };
        let out = embed_events(&[tok], &params, &config, &side).unwrap();
        assert_eq!(out, params.item_id.row(2));
    }

    #[test]
    fn masked_and_out_of_vocab_use_oov_vector() {
        let (config, mut params, mut side) = setup();
        side.features.iter_mut().for_each(|v| *v = 0.0);
        params.context.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        let masked = EventToken { item: Some(1), masked: true, context: vec![0, 0] };
        let cold = EventToken { item: Some(4), masked: false, context: vec![0, 0] };
        let out = embed_events(&[masked, cold], &params, &config, &side).unwrap();
        assert_eq!(&out[..8], &params.oov.data[..]);
        assert_eq!(&out[8..], &params.oov.data[..]);
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let (config, params, side) = setup();
        let a = EventToken { item: Some(0), masked: false, context: vec![2, 1] };
        let b = EventToken { item: Some(3), masked: false, context: vec![0, 1] };
        let ab = embed_events(&[a.clone(), b.clone()], &params, &config, &side).unwrap();
        let ba = embed_events(&[b, a], &params, &config, &side).unwrap();
        assert_eq!(&ab[..8], &ba[8..]);
        assert_eq!(&ab[8..], &ba[..8]);
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        let (config, params, side) = setup();
        let bad_item = EventToken { item: Some(5), masked: false, context: vec![0, 0] };
        assert!(embed_events(&[bad_item], &params, &config, &side).is_err());
        let bad_ctx = EventToken { item: None, masked: false, context: vec![3, 0] };
        assert!(embed_events(&[bad_ctx], &params, &config, &side).is_err());
    }
}
