use super::{AdapterChannel, Dispatcher, EmbedRequest, RewriteRequest, TemplateId};
use crate::error::{GrapeError, Result};
use crate::optim::{derive_seed, RewriteEnv};
use crate::policy::QueryContext;
use crate::reward::validate_format;
use crate::synthenv::Testbed;
use crate::vecindex::{CorpusIndex, Embedding};

/// Rewrite environment backed by an adapter.
///
/// Each sampled action becomes one single-output rewrite request whose
/// `query_text` is the action's label. Outputs pass through the format
/// gate on the host, and surviving answers are embedded by the adapter.
/// A request that times out counts as a format failure; any other
/// protocol fault aborts the step.
pub struct BridgeEnv<'a, C> {
    index: &'a CorpusIndex,
    queries: &'a [QueryContext],
    labels: Vec<Vec<String>>,
    template: TemplateId,
    dispatcher: Dispatcher<C>,
    timeouts: usize,
}

impl<'a, C: AdapterChannel> BridgeEnv<'a, C> {
    /// Checks the adapter's announced width against the corpus.
    pub fn connect(
        index: &'a CorpusIndex,
        queries: &'a [QueryContext],
        labels: Vec<Vec<String>>,
        template: TemplateId,
        mut dispatcher: Dispatcher<C>,
    ) -> Result<Self> {
        if labels.len() != queries.len() {
            return Err(GrapeError::Parameter(format!(
                "{} action tables for {} queries",
                labels.len(),
                queries.len()
            )));
        }
        let width = labels.first().map_or(0, Vec::len);
        if labels.iter().any(|l| l.len() != width) {
            return Err(GrapeError::Parameter("action tables differ in size".into()));
        }
        dispatcher.ensure_dim(index.dim())?;
        Ok(Self {
            index,
            queries,
            labels,
            template,
            dispatcher,
            timeouts: 0,
        })
    }

    pub fn for_testbed(tb: &'a Testbed, template: TemplateId, dispatcher: Dispatcher<C>) -> Result<Self> {
        let labels = tb
            .actions
            .iter()
            .map(|row| row.iter().map(|a| a.label.clone()).collect())
            .collect();
        Self::connect(&tb.index, &tb.queries, labels, template, dispatcher)
    }

    /// Rewrites scored as format failures because the adapter timed out.
    pub fn timeouts(&self) -> usize {
        self.timeouts
    }

    pub fn dispatcher_mut(&mut self) -> &mut Dispatcher<C> {
        &mut self.dispatcher
    }

    fn image_ref(&self, query_id: u64) -> Option<String> {
        (self.template == TemplateId::Multimodal).then(|| format!("query:{query_id}"))
    }
}

impl<C: AdapterChannel> RewriteEnv for BridgeEnv<'_, C> {
    fn index(&self) -> &CorpusIndex {
        self.index
    }

    fn queries(&self) -> &[QueryContext] {
        self.queries
    }

    fn action_count(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    fn realize(
        &mut self,
        query_index: usize,
        actions: &[usize],
        request_seed: u64,
    ) -> Result<Vec<Option<Embedding>>> {
        let ctx = &self.queries[query_index];
        let row = &self.labels[query_index];
        let mut requests = Vec::with_capacity(actions.len());
        for (j, &a) in actions.iter().enumerate() {
            let label = row
                .get(a)
                .ok_or_else(|| GrapeError::Parameter(format!("action {a} outside 0..{}", row.len())))?;
            requests.push(RewriteRequest::new(
                ctx.query_id,
                label.clone(),
                self.template,
                self.image_ref(ctx.query_id),
                1,
                derive_seed(request_seed, &[j as u64]),
            ));
        }

        let mut answers: Vec<Option<String>> = Vec::with_capacity(actions.len());
        for resp in self.dispatcher.rewrite_many(requests) {
            match resp {
                Ok(r) => answers.push(validate_format(&r.raw_outputs[0]).answer_text),
                Err(GrapeError::Timeout(ms)) => {
                    log::warn!("rewrite for query {} timed out after {ms} ms", ctx.query_id);
                    self.timeouts += 1;
                    answers.push(None);
                }
                Err(e) => return Err(e),
            }
        }

        let texts: Vec<String> = answers.iter().flatten().cloned().collect();
        if texts.is_empty() {
            return Ok(vec![None; actions.len()]);
        }
        let mut vectors = match self.dispatcher.embed(EmbedRequest::texts(texts), self.index.dim()) {
            Ok(v) => v.into_iter(),
            Err(GrapeError::Timeout(ms)) => {
                log::warn!("embedding for query {} timed out after {ms} ms", ctx.query_id);
                self.timeouts += answers.iter().flatten().count();
                return Ok(vec![None; actions.len()]);
            }
            Err(e) => return Err(e),
        };
        Ok(answers
            .iter()
            .map(|a| a.as_ref().and_then(|_| vectors.next()))
            .collect())
    }
}
