//! ASPP over the concatenated correlation maps, followed by the upsampling
//! decoder that produces two-class logits at input resolution.

use alloc::format;

use super::layers::{self, Conv2d};
use super::params::Params;
use crate::error::Result;
use crate::tensor::Tensor;

/// Decoder upsampling: ×4 then ×2, matching the extractor stride of 8.
pub(crate) const UPSAMPLE: [usize; 2] = [4, 2];

pub(crate) struct Head {
    pub atrous: [Conv2d; 3],
    pub point: Conv2d,
    pub pooled: Conv2d,
    pub dec1: Conv2d,
    pub dec2: Conv2d,
    pub dec3: Conv2d,
    pub classifier: Conv2d,
}

pub(crate) struct HeadCache {
    x: Tensor,
    atrous: [Tensor; 3],
    point: Tensor,
    gap: Tensor,
    pooled: Tensor,
    cat: Tensor,
    d1: Tensor,
    d2: Tensor,
    u1: Tensor,
    d3: Tensor,
    u2: Tensor,
}

impl Head {
    pub fn new(
        params: &mut Params,
        in_ch: usize,
        rates: [usize; 3],
        aspp_ch: usize,
        dec_ch: usize,
    ) -> Self {
        let atrous = [0, 1, 2].map(|i| {
            Conv2d::new(params, &format!("aspp.rate{}", rates[i]), in_ch, aspp_ch, 3, rates[i])
        });
        let point = Conv2d::new(params, "aspp.point", in_ch, aspp_ch, 1, 1);
        let pooled = Conv2d::new(params, "aspp.image_pool", in_ch, aspp_ch, 1, 1);
        let dec1 = Conv2d::new(params, "decoder.conv1", 5 * aspp_ch, dec_ch, 3, 1);
        let dec2 = Conv2d::new(params, "decoder.conv2", dec_ch, dec_ch, 3, 1);
        let dec3 = Conv2d::new(params, "decoder.conv3", dec_ch, dec_ch, 3, 1);
        let classifier = Conv2d::new(params, "decoder.classifier", dec_ch, 2, 1, 1);
        Self {
            atrous,
            point,
            pooled,
            dec1,
            dec2,
            dec3,
            classifier,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.atrous.iter().chain([
            &self.point,
            &self.pooled,
            &self.dec1,
            &self.dec2,
            &self.dec3,
            &self.classifier,
        ])
    }

    fn conv_relu(conv: &Conv2d, p: &Params, x: &Tensor) -> Tensor {
        let mut y = conv.forward(p, x);
        layers::relu_inplace(&mut y);
        y
    }

    /// `3T × h × w` correlation tensor → `2 × 8h × 8w` logits.
    pub fn forward(&self, p: &Params, x: &Tensor, keep: bool) -> Result<(Tensor, Option<HeadCache>)> {
        let (h, w) = (x.height(), x.width());
        let atrous = [0, 1, 2].map(|i| Self::conv_relu(&self.atrous[i], p, x));
        let point = Self::conv_relu(&self.point, p, x);
        let gap = layers::global_avg_pool(x);
        let pooled = Self::conv_relu(&self.pooled, p, &gap);
        let pooled_map = layers::broadcast(&pooled, h, w);
        let cat = layers::concat_channels(&[&atrous[0], &atrous[1], &atrous[2], &point, &pooled_map])?;
        let d1 = Self::conv_relu(&self.dec1, p, &cat);
        let d2 = Self::conv_relu(&self.dec2, p, &d1);
        let u1 = layers::upsample_bilinear(&d2, UPSAMPLE[0]);
        let d3 = Self::conv_relu(&self.dec3, p, &u1);
        let u2 = layers::upsample_bilinear(&d3, UPSAMPLE[1]);
        let logits = self.classifier.forward(p, &u2);
        let cache = keep.then(|| HeadCache {
            x: x.clone(),
            atrous,
            point,
            gap,
            pooled,
            cat,
            d1,
            d2,
            u1,
            d3,
            u2,
        });
        Ok((logits, cache))
    }

    pub fn backward(&self, p: &Params, c: &HeadCache, dlogits: &Tensor, g: &mut Params) -> Tensor {
        let (h, w) = (c.x.height(), c.x.width());
        let du2 = self.classifier.backward(p, &c.u2, dlogits, g, true).unwrap();
        let mut dd3 = layers::upsample_bilinear_backward(&du2, c.d3.height(), c.d3.width(), UPSAMPLE[1]);
        layers::relu_backward(&c.d3, &mut dd3);
        let du1 = self.dec3.backward(p, &c.u1, &dd3, g, true).unwrap();
        let mut dd2 = layers::upsample_bilinear_backward(&du1, h, w, UPSAMPLE[0]);
        layers::relu_backward(&c.d2, &mut dd2);
        let mut dd1 = self.dec2.backward(p, &c.d1, &dd2, g, true).unwrap();
        layers::relu_backward(&c.d1, &mut dd1);
        let dcat = self.dec1.backward(p, &c.cat, &dd1, g, true).unwrap();

        let a = self.point.out_ch;
        let mut dx = Tensor::zeros(c.x.channels(), h, w);
        for i in 0..3 {
            let mut db = dcat.channel_slice(i * a, (i + 1) * a).unwrap();
            layers::relu_backward(&c.atrous[i], &mut db);
            dx.add_assign(&self.atrous[i].backward(p, &c.x, &db, g, true).unwrap());
        }
        let mut dp = dcat.channel_slice(3 * a, 4 * a).unwrap();
        layers::relu_backward(&c.point, &mut dp);
        dx.add_assign(&self.point.backward(p, &c.x, &dp, g, true).unwrap());
        let mut dpool = layers::broadcast_backward(&dcat.channel_slice(4 * a, 5 * a).unwrap());
        layers::relu_backward(&c.pooled, &mut dpool);
        let dgap = self.pooled.backward(p, &c.gap, &dpool, g, true).unwrap();
        dx.add_assign(&layers::global_avg_pool_backward(&dgap, h, w));
        dx
    }
}
